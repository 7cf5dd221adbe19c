//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use dsc_core::controller::Controller;
use dsc_core::dsc::{self, features_at, loss_gradient, ConstraintSet, DscController};
use dsc_core::harness::{run_experiment, write_outputs, ExperimentConfig, ExperimentOutput};
use dsc_core::lds::{random_system, CostFunction, SimState};
use dsc_core::memoryless::ParamTensor;
use dsc_core::signals::{ConvMode, NatureState, StreamConvolver};
use dsc_core::spectral::SpectralBasis;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn filter_bank() -> Verdict {
    let start = Instant::now();
    let mut worst_orth = 0.0f64;
    let mut ordered = true;
    let mut bounded = true;
    for (size, gamma) in [(11, 0.2), (101, 0.1), (501, 0.05)] {
        let basis = SpectralBasis::compute(size, size, gamma).unwrap();
        let phi = basis.filter_matrix();
        let gram = phi.transpose() * &phi - DMatrix::identity(size, size);
        worst_orth = worst_orth.max(gram.amax());
        ordered &= basis.eigenvalues().windows(2).all(|w| w[0] >= w[1]);
        bounded &= basis.eigenvalues().iter().all(|&s| s <= (2.0 / gamma).ln());
    }
    let elapsed = start.elapsed();
    Verdict::new(
        worst_orth < 1e-10 && ordered && bounded && elapsed < Duration::from_secs(5),
        format!(
            "max |ΦᵀΦ − I| = {worst_orth:.2e}, descending = {ordered}, σ ≤ ln(2/γ) = {bounded}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn double_convolution() -> Verdict {
    let mut rng = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let inst = small_instance(&mut rng);
        let (d, n, p) = (inst.model.state_dim(), inst.model.control_dim(), inst.model.obs_dim());
        let frozen = ConstraintSet::new(f64::MAX, f64::MAX).unwrap();
        let mut ctrl = DscController::new(
            inst.model.clone(),
            CostFunction::identity(p, n),
            inst.params.clone(),
            frozen,
            4,
            ConvMode::Fast,
        )
        .unwrap();
        let mut state = SimState::from_state(gaussian_vec(&mut rng, d, 1.0));
        let mut tracker = ReferenceTracker::new(d);
        let mut y_nat = Vec::new();
        let mut u_prev = DVector::zeros(n);
        for t in 0..40 {
            let y = state.observe(&inst.model);
            y_nat.push(tracker.update(&inst.model, &u_prev, &y));
            let oracle = quadruple_sum(&inst.params, &y_nat, t);
            let streamed = ctrl.act(&y).unwrap();
            let direct = inst.params.tensor.apply(&features_at(&inst.params, &y_nat, t as isize).unwrap()).unwrap();
            worst = worst.max((&streamed - &oracle).amax()).max((&direct - &oracle).amax());
            state.step(&inst.model, &streamed, &gaussian_vec(&mut rng, d, 1.0)).unwrap();
            u_prev = streamed;
        }
    }
    Verdict::new(worst < 1e-8, format!("50 instances x 40 steps, max |u − oracle| = {worst:.2e}"))
}

fn gradient_check() -> Verdict {
    let mut rng = rng(202);
    let mut worst = 0.0f64;
    let instances = 120;
    for _ in 0..instances {
        let inst = small_instance(&mut rng);
        let (p, n) = (inst.model.obs_dim(), inst.model.control_dim());
        let cost = CostFunction::quadratic(random_psd(&mut rng, p), random_psd(&mut rng, n)).unwrap();
        let len = rng.random_range(1..=15);
        let truncation = rng.random_range(1..=8);
        let y_nat: Vec<_> = (0..len).map(|_| gaussian_vec(&mut rng, p, 1.0)).collect();
        let loss = |m: &ParamTensor| {
            let mut probe = inst.params.clone();
            probe.tensor = m.clone();
            dsc::memoryless_loss(&probe, &y_nat, &inst.model, &cost, truncation).unwrap()
        };
        let grad = loss_gradient(&inst.params, &y_nat, &inst.model, &cost, truncation).unwrap();
        let fd = finite_difference(&inst.params.tensor, 1e-6, loss);
        worst = worst.max(relative_error(&grad, &fd));
    }
    Verdict::new(worst < 1e-5, format!("{instances} instances, max relative error = {worst:.2e}"))
}

fn stream_outputs(conv: &mut StreamConvolver, inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(inputs.len() * conv.filter_count());
    for x in inputs {
        conv.push(x).unwrap();
        for j in 0..conv.filter_count() {
            out.push(conv.query(j).unwrap());
        }
    }
    out
}

fn fast_convolution() -> Verdict {
    let start = Instant::now();
    let mut rng = rng(303);
    let len = 1 << 14;
    let dim = 2;
    let filters: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..len).map(|k| 0.999f64.powi(k) * rng.random_range(-1.0..1.0)).collect())
        .collect();
    let inputs: Vec<_> = (0..len).map(|_| gaussian_vec(&mut rng, dim, 1.0)).collect();

    let mut fast = StreamConvolver::new(dim, filters.clone(), ConvMode::Fast).unwrap();
    let mut naive = StreamConvolver::new(dim, filters.clone(), ConvMode::Naive).unwrap();
    let a = stream_outputs(&mut fast, &inputs);
    let b = stream_outputs(&mut naive, &inputs);
    let worst = a.iter().zip(&b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);

    let timed = |steps: usize| -> f64 {
        let mut conv = StreamConvolver::new(dim, filters.clone(), ConvMode::Fast).unwrap();
        let clock = Instant::now();
        stream_outputs(&mut conv, &inputs[..steps]);
        clock.elapsed().as_secs_f64()
    };
    // Interleaved runs, best of 15 per size.
    let (mut small, mut large) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..15 {
        small = small.min(timed(1 << 12));
        large = large.min(timed(1 << 13));
    }
    let ratio = large / small;
    let elapsed = start.elapsed();
    Verdict::new(
        worst < 1e-10 && ratio < 3.0 && elapsed < Duration::from_secs(30),
        format!(
            "length 2^14, max |fast − naive| = {worst:.2e}, time(2^13)/time(2^12) = {ratio:.2}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn nature_tracker() -> Verdict {
    let mut rng = rng(404);
    let mut mismatched_runs = 0;
    let mut worst = 0.0f64;
    let mut zero_control_exact = true;
    for _ in 0..20 {
        let model = random_system(10, 2, 3, 0.8, &mut rng).unwrap();
        let x0 = gaussian_vec(&mut rng, 10, 1.0);
        let ws: Vec<_> = (0..500).map(|_| gaussian_vec(&mut rng, 10, 1.0)).collect();
        let replay = zero_control_replay(&model, &x0, &ws);

        for controlled in [true, false] {
            let mut state = SimState::from_state(x0.clone());
            let mut nature = NatureState::new(&model, 1);
            let mut u_prev = DVector::zeros(2);
            let mut exact = true;
            for (t, w) in ws.iter().enumerate() {
                let y = state.observe(&model);
                let y_nat = nature.update(t, &model, &u_prev, &y).unwrap();
                if y_nat != replay[t] {
                    exact = false;
                    let scale = replay[t].amax().max(1.0);
                    worst = worst.max((&y_nat - &replay[t]).amax() / scale);
                }
                let u = if controlled { gaussian_vec(&mut rng, 2, 1.0) } else { DVector::zeros(2) };
                state.step(&model, &u, w).unwrap();
                u_prev = u;
            }
            if controlled {
                mismatched_runs += usize::from(!exact);
            } else {
                zero_control_exact &= exact;
            }
        }
    }
    Verdict::new(
        mismatched_runs == 0,
        format!(
            "{mismatched_runs}/20 controlled runs differ bitwise from the zero-control replay \
             (max relative deviation {worst:.2e}); zero-control runs bitwise equal = {zero_control_exact}"
        ),
    )
}

fn truncation_decay() -> Verdict {
    let mut rng = rng(505);
    let model = random_system(10, 2, 3, 0.8, &mut rng).unwrap();
    let cost = CostFunction::identity(3, 2);
    let base = (1.0 / model.gamma).ceil() as usize;
    let bound = (1.0 - model.gamma).powi(base as i32) * model.kappa.powi(2) * 10.0;
    let (mut short, mut long, mut worst) = (0.0, 0.0, 0.0f64);
    for _ in 0..20 {
        let mut params = dsc::DscParams::new(2, 2, 6, 4, model.gamma, 2, 3, 0.0).unwrap();
        randomize(&mut params.tensor, &mut rng, 0.1);
        let x0 = gaussian_vec(&mut rng, 10, 1.0);
        let ws: Vec<_> = (0..200).map(|_| gaussian_vec(&mut rng, 10, 1.0)).collect();
        let y_nat = zero_control_replay(&model, &x0, &ws);
        let exact = dsc::memoryless_loss(&params, &y_nat, &model, &cost, y_nat.len() - 1).unwrap();
        let error = |l: usize| (dsc::memoryless_loss(&params, &y_nat, &model, &cost, l).unwrap() - exact).abs();
        let (e1, e2) = (error(base), error(2 * base));
        short += e1;
        long += e2;
        worst = worst.max(e2 / e1);
    }
    let ratio = long / short;
    Verdict::new(
        ratio < bound,
        format!(
            "d = 10, 20 draws, truncation error ratio L_G {base} -> {}: {ratio:.3} < (1−γ)^L_G κ² 10 = {bound:.3} \
             (largest single draw {worst:.3})",
            2 * base
        ),
    )
}

struct Benchmark {
    csv: Vec<(String, Vec<u8>)>,
    outputs: Vec<(String, ExperimentOutput)>,
    seconds: Vec<f64>,
}

const SETTINGS: [&str; 4] = ["linear_gaussian", "linear_sinusoid", "relu_gaussian", "relu_sinusoid"];

fn run_benchmark(dir: &Path, threads: Option<usize>) -> Benchmark {
    let mut csv = Vec::new();
    let mut outputs = Vec::new();
    let mut seconds = Vec::new();
    for name in SETTINGS {
        let config = ExperimentConfig::load(configs_dir().join(format!("{name}.json"))).unwrap();
        let clock = Instant::now();
        let output = run_experiment(&config, threads).unwrap();
        seconds.push(clock.elapsed().as_secs_f64());
        let path = write_outputs(&config, &output, dir.join(name)).unwrap();
        csv.push((name.to_string(), std::fs::read(path).unwrap()));
        outputs.push((name.to_string(), output));
    }
    Benchmark { csv, outputs, seconds }
}

fn final_windows(output: &ExperimentOutput) -> [(f64, f64, f64); 3] {
    ["LQG", "DSC", "GRC"].map(|c| output.aggregate.final_window(c).unwrap())
}

fn describe(output: &ExperimentOutput) -> String {
    let [lqg, dsc, grc] = final_windows(output);
    format!(
        "LQG {:.3} [{:.3}, {:.3}], DSC {:.3} [{:.3}, {:.3}], GRC {:.3} [{:.3}, {:.3}]",
        lqg.0, lqg.1, lqg.2, dsc.0, dsc.1, dsc.2, grc.0, grc.1, grc.2
    )
}

fn gaussian_ordering(bench: &Benchmark) -> Verdict {
    let out = &bench.outputs[0].1;
    let [lqg, dsc, grc] = final_windows(out);
    let ordered = lqg.0 <= dsc.0 && dsc.0 <= grc.0;
    let separated = dsc.2 < grc.1;
    let seconds = bench.seconds[0];
    Verdict::new(
        out.failures.is_empty() && ordered && separated && seconds < 600.0,
        format!(
            "{}; ordering LQG ≤ DSC ≤ GRC = {ordered}, DSC/GRC intervals disjoint = {separated}, {seconds:.1}s",
            describe(out)
        ),
    )
}

fn sinusoid_ordering(bench: &Benchmark) -> Verdict {
    let out = &bench.outputs[1].1;
    let [lqg, dsc, grc] = final_windows(out);
    Verdict::new(
        out.failures.is_empty() && dsc.0 <= lqg.0 && dsc.0 <= grc.0,
        format!("{}; DSC ≤ LQG and DSC ≤ GRC", describe(out)),
    )
}

fn relu_runs(bench: &Benchmark) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, out) in &bench.outputs[2..] {
        let [lqg, dsc, grc] = final_windows(out);
        pass &= out.failures.is_empty() && dsc.0 <= grc.0 && [lqg, dsc, grc].iter().all(|c| c.0.is_finite());
        parts.push(format!(
            "{name}: {} aborted trials, DSC {:.3} vs GRC {:.3}, LQG {:.3e}",
            out.failures.len(),
            dsc.0,
            grc.0,
            lqg.0
        ));
    }
    Verdict::new(pass, parts.join("; "))
}

fn determinism(first: &Benchmark, dir: &Path) -> Verdict {
    let second = run_benchmark(dir, Some(2));
    let identical = first.csv == second.csv;
    let bytes: usize = first.csv.iter().map(|(_, b)| b.len()).sum();
    Verdict::new(
        identical,
        format!("two runs of all {} settings, {bytes} CSV bytes, byte-identical = {identical}", SETTINGS.len()),
    )
}

fn report(results: &mut Vec<bool>, name: &str, verdict: Verdict) {
    let tag = if verdict.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {name}: {}", verdict.detail);
    results.push(verdict.pass);
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    report(&mut results, "filter bank", filter_bank());
    report(&mut results, "double convolution vs quadruple sum", double_convolution());
    report(&mut results, "gradient vs finite differences", gradient_check());
    report(&mut results, "fast vs naive convolution", fast_convolution());
    report(&mut results, "nature tracker vs zero-control replay", nature_tracker());
    report(&mut results, "truncation decay", truncation_decay());

    let scratch = tempfile::tempdir().unwrap();
    let bench = run_benchmark(&scratch.path().join("first"), None);
    report(&mut results, "linear, Gaussian noise", gaussian_ordering(&bench));
    report(&mut results, "linear, sinusoidal noise", sinusoid_ordering(&bench));
    report(&mut results, "ReLU transition", relu_runs(&bench));
    report(&mut results, "determinism", determinism(&bench, &scratch.path().join("second")));

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
