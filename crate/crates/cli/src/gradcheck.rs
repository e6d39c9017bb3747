use anyhow::{ensure, Result};
use symlora::adapters::{init_lora, init_symlora, AdaptedLinear, Adapter, AdapterKind, BaseLinear, SYM_LAMBDA};
use symlora::numerics::{
    finite_difference_gradient, gaussian_matrix, max_relative_error, Elementwise, Matrix, ParamSet, SeededRng, Tape,
};
use symlora::tasks::PlantedLinearTask;
use symlora::training::Learner;

pub struct GradCheckReport {
    pub cases: usize,
    pub max_relative_error: f64,
}

fn randomized(kind: AdapterKind, n: usize, m: usize, r: usize, rng: &mut SeededRng) -> Result<Adapter<f64>> {
    let mut adapter = match kind {
        AdapterKind::Lora => Adapter::Lora(init_lora(n, m, r, r as f64, 0.02, rng)?),
        _ => Adapter::SymLora(init_symlora(n, r, r as f64, 0.02, rng)?),
    };
    let shapes: Vec<_> = adapter.tensors().iter().map(|(s, t)| (*s, t.shape())).collect();
    for (suffix, (rows, cols)) in shapes {
        let value = if suffix == SYM_LAMBDA {
            Matrix::scalar(0.5 + rng.uniform())
        } else {
            gaussian_matrix(rows, cols, 0.5, rng)
        };
        adapter.set_tensor(suffix, value)?;
    }
    Ok(adapter)
}

/// Compares tape gradients of `mse(tanh(layer(x)), y)` with central
/// differences over `cases` random layers of each adapter kind.
pub fn run(seed: u64, cases: usize) -> Result<GradCheckReport> {
    let root = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for case in 0..cases as u64 {
        let mut rng = root.derive(case);
        let n = 2 + rng.below(23);
        let r = 1 + rng.below(4.min(n));
        let batch = 1 + rng.below(4);
        for kind in [AdapterKind::Lora, AdapterKind::Symlora] {
            let m = if kind == AdapterKind::Lora { r + rng.below(25 - r) } else { n };
            let w0 = gaussian_matrix(n, m, 1.0 / (m as f64).sqrt(), &mut rng);
            let layer = AdaptedLinear::with_adapter(BaseLinear::new(w0, 0, "probe"), randomized(kind, n, m, r, &mut rng)?)?;
            let x = gaussian_matrix(m, batch, 1.0, &mut rng);
            let y = gaussian_matrix(n, batch, 1.0, &mut rng);

            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let yn = tape.constant(y.clone());
            let h = layer.forward_tape(&mut tape, xn, false, None)?;
            let h = tape.map(h, Elementwise::Tanh);
            let loss = tape.mse(h, yn)?;
            let grads = tape.backward(loss)?;

            let params = Learner::<f64, PlantedLinearTask<f64>>::trainable_params(&layer);
            let loss_at = |p: &ParamSet<f64>| {
                let mut probe = layer.clone();
                Learner::<f64, PlantedLinearTask<f64>>::set_trainable_params(&mut probe, p).expect("same shapes");
                let out = probe.forward(&x).expect("same shapes").map(f64::tanh);
                let d = out.sub(&y).expect("same shapes");
                d.as_slice().iter().map(|v| v * v).sum::<f64>() / d.len() as f64
            };
            let fd = finite_difference_gradient(loss_at, &params, 1e-5);
            let err = max_relative_error(&grads, &fd);
            ensure!(err.is_finite(), "non-finite gradient error in case {case} ({})", kind.as_str());
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        cases: checked,
        max_relative_error: worst,
    })
}
