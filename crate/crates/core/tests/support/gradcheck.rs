//! Central finite-difference oracle for tape gradients.

use deform_mvs::{Tape, Tensor, Var};

pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input, element, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of `f` against central differences of step `h`
/// for every element of every input. Elements with `|analytic| <= floor` are
/// skipped for the relative measure.
pub fn check<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> GradReport
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    check_strided(inputs, h, floor, 1, f)
}

/// Like [`check`] but only probes every `stride`-th element of each input.
pub fn check_strided<F>(inputs: &[Tensor], h: f64, floor: f64, stride: usize, f: F) -> GradReport
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).expect("backward");

    let eval = |perturbed: &[Tensor]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&t, &vs);
        t.value(l).item()
    };

    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in (0..input.numel()).step_by(stride.max(1)) {
            let bump = |delta: f64| {
                let mut data = input.data().to_vec();
                data[i] += delta;
                let mut all = inputs.to_vec();
                all[k] = Tensor::new(input.shape().to_vec(), data).unwrap();
                eval(&all)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            if a.abs() <= floor {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            report.checked += 1;
            if rel > 1e-3 && std::env::var_os("GRADCHECK_VERBOSE").is_some() {
                eprintln!("input {k} element {i}: analytic {a:.6e} numeric {numeric:.6e}");
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    report
}

/// Deterministic uniform values in [-1, 1].
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}
