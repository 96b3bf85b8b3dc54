use rand::Rng;
use voxsr::diffmath::{backward_into_store, fd, ParamStore, Tape};
use voxsr::scenegen::rng_from_seed;

fn main() {
    let mut rng = rng_from_seed(5);
    let k = 6usize;
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..2.0)).collect();
    let deltas: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..0.3)).collect();
    let payload: Vec<f64> = (0..k * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let target = vec![0.3, 0.4, 0.5];
    let active: Vec<u32> = vec![0, 2, 3, 5]; // subset active

    let mut store = ParamStore::new();
    let sid = store.register("sigma", vec![1, k], raw.clone(), 1e-3).unwrap();

    let build = |s: &ParamStore, tape: &mut Tape| -> usize {
        let mut parts = Vec::new();
        for i in 0..k {
            let mut w = [0.0; 8];
            w[0] = 1.0;
            parts.push(tape.grid_gather(s, s.id("sigma").unwrap(), [i as u32; 8], w, 1));
        }
        let sig = tape.concat(parts);
        let pay_rows: Vec<usize> = active
            .iter()
            .map(|&i| tape.leaf(payload[i as usize * 3..i as usize * 3 + 3].to_vec()))
            .collect();
        let pay = tape.stack_rows(pay_rows);
        let out = tape
            .composite(sig, deltas.clone(), pay, active.clone(), vec![1.0, 1.0, 1.0])
            .unwrap();
        tape.sq_diff_sum(out, target.clone())
    };

    let mut tape = Tape::new();
    let loss = build(&store, &mut tape);
    eprintln!("loss {}", tape.scalar(loss));
    backward_into_store(&mut tape, &mut store, loss).unwrap();
    let analytic = store.grads(sid).to_vec();

    let err = fd::max_grad_error(
        &mut store,
        &[sid],
        |s| {
            let mut t = Tape::new();
            let l = build(s, &mut t);
            t.scalar(l)
        },
        1e-5,
    );
    eprintln!("analytic {analytic:?}");
    eprintln!("composite sigma fd err: {err:.3e}");
}
