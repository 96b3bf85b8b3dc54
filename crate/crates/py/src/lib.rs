use pyo3::prelude::*;

#[pymodule]
fn voxsr_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
