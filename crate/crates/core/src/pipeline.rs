//! Experiment orchestration: staged runs with hash-based resume, ablation
//! tables, and report emission. Fleshed out alongside the CLI.
