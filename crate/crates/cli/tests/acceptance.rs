//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers. The training-heavy criteria share a single ablation
//! sweep that runs once and is reused by every assertion on it.

use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use np_cli::config::ExperimentConfig;
use np_core::diagnostics::{
    channel_subset_transfer, run_sweep, sensitivity_ranking, MaskDirection, SweepAggregate,
    SweepSpec, SweepTable,
};
use np_core::domains::{make_benchmark, BenchmarkSizes, Dataset};
use np_core::gradcheck::{compare_gradients, finite_difference_grad};
use np_core::net::{NetworkConfig, StageSpec, ToyNet};
use np_core::np::{sample_noise, NoiseDraw, NoiseSpec, NpSiteConfig, SiteRng};
use np_core::rng::{split_seed, stream};
use np_core::stats::{channel_mean_std, mmd, Kernel};
use np_core::tape::{FieldLayout, PerturbField, Tape, Var};
use np_core::tensor::Tensor;

const POINT: f64 = 0.01; // one accuracy point

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ── shared sweep (criteria 7–11, 13) ────────────────────────────────

fn acceptance_sweep_spec() -> SweepSpec {
    let config = ExperimentConfig::load(None).expect("embedded default config");
    let mut section = config.diagnostics.sweep.clone();
    section.seeds = vec![1, 2, 3];
    section.p_grid = vec![0.0, 0.25, 0.5, 0.75, 1.0];
    section.noise_grid = vec![
        NoiseSpec::BetaScaled { a: 0.75, b: 0.75 },
        NoiseSpec::Uniform { lo: 0.0, hi: 2.0 },
        NoiseSpec::gaussian(1.0, 0.5),
        NoiseSpec::gaussian(1.0, 1.0),
    ];
    section.placements = vec![vec![3]];
    section.granularities = vec![];
    section.include_np_plus = true;
    let mut config = config;
    config.diagnostics.sweep = section;
    config.sweep_spec(Some(1))
}

fn sweep_table() -> &'static SweepTable {
    static TABLE: OnceLock<SweepTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let spec = acceptance_sweep_spec();
        eprintln!(
            "[acceptance] running shared sweep: {} cells × {} seeds…",
            spec.cells.len(),
            spec.seeds.len()
        );
        let table = run_sweep(&spec).expect("sweep");
        assert!(
            table.skipped.is_empty(),
            "sweep skipped cells: {:?}",
            table.skipped
        );
        table
    })
}

fn aggregate(cell: &str) -> SweepAggregate {
    let table = sweep_table();
    let aggs = table.aggregate();
    SweepTable::find_aggregate(&aggs, cell)
        .unwrap_or_else(|| panic!("missing sweep cell {cell}"))
        .clone()
}

// ── criterion 1 ─────────────────────────────────────────────────────

#[test]
fn criterion_01_np_equivalence() {
    let mut rng = stream(1001, "acceptance");
    for case in 0..100 {
        let b = rng.gen_range(1..=4);
        let c = rng.gen_range(1..=8);
        let hw = rng.gen_range(2..=16);
        let x = random_tensor(&[b, c, hw, hw], &mut rng);
        let draw: NoiseDraw<f64> =
            sample_noise(&NoiseSpec::gaussian(1.0, 0.75), b, c, &mut rng).unwrap();
        let fast = np_core::np::np_forward(&x, &draw).unwrap();
        let reference = np_core::np::np_reference(&x, &draw, 1e-12).unwrap();
        for (i, (a, r)) in fast.data().iter().zip(reference.data()).enumerate() {
            assert!(
                (a - r).abs() < 1e-9,
                "case {case} element {i}: |{a} − {r}| ≥ 1e-9"
            );
        }
    }
    println!("[PASS] criterion 1: division-free and literal forms agree within 1e-9 on 100 random tensors");
}

// ── criterion 2 ─────────────────────────────────────────────────────

#[test]
fn criterion_02_perturbed_statistics_realized() {
    let mut rng = stream(1002, "acceptance");
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let b = rng.gen_range(1..=4);
        let c = rng.gen_range(1..=8);
        let hw = rng.gen_range(2..=12);
        let x = random_tensor(&[b, c, hw, hw], &mut rng);
        let draw: NoiseDraw<f64> =
            sample_noise(&NoiseSpec::gaussian(1.0, 0.75), b, c, &mut rng).unwrap();
        let before = channel_mean_std(&x).unwrap();
        let after = channel_mean_std(&np_core::np::np_forward(&x, &draw).unwrap()).unwrap();
        for i in 0..before.mean.len() {
            let mean_err = (after.mean[i] - draw.beta[i] * before.mean[i]).abs();
            let std_err = (after.std[i] - draw.alpha[i].abs() * before.std[i]).abs();
            worst = worst.max(mean_err).max(std_err);
            assert!(mean_err < 1e-10, "mean(y) ≠ β·μ: err {mean_err}");
            assert!(std_err < 1e-10, "std(y) ≠ |α|·σ: err {std_err}");
        }
    }
    println!("[PASS] criterion 2: perturbed stats realized exactly (worst error {worst:.3e} < 1e-10)");
}

// ── criterion 3 ─────────────────────────────────────────────────────

fn check_grad(name: &str, x0: &Tensor<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let loss = build(&mut tape, x);
    tape.backward(loss).unwrap();
    let analytic = tape.grad_tensor(x).unwrap();
    let numeric = finite_difference_grad(
        |probe| {
            let mut t = Tape::new();
            let x = t.leaf(probe.clone(), false);
            let loss = build(&mut t, x);
            t.value(loss).scalar_value()
        },
        x0,
        1e-5,
    )
    .unwrap();
    let cmp = compare_gradients(&analytic, &numeric).unwrap();
    assert!(
        cmp.within(1e-4, 1e-7),
        "{name}: max_rel {} max_abs_small {}",
        cmp.max_rel,
        cmp.max_abs_small
    );
    cmp.max_rel
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.leaf(weights.clone(), false);
    let prod = tape.mul(y, w).unwrap();
    tape.sum(prod)
}

#[test]
fn criterion_03_gradient_suite() {
    let mut rng = stream(1003, "acceptance");
    let mut worst: f64 = 0.0;

    // (a) primitives
    let x = random_tensor(&[2, 3, 6, 6], &mut rng);
    let w = random_tensor(&[4, 3, 3, 3], &mut rng);
    let b = random_tensor(&[4], &mut rng);
    let r = random_tensor(&[2, 4, 6, 6], &mut rng);
    worst = worst.max(check_grad("conv2d/x", &x, |t, xv| {
        let wv = t.leaf(w.clone(), false);
        let bv = t.leaf(b.clone(), false);
        let y = t.conv2d(xv, wv, bv, 1, 1).unwrap();
        weighted_sum(t, y, &r)
    }));
    worst = worst.max(check_grad("conv2d/w", &w, |t, wv| {
        let xv = t.leaf(x.clone(), false);
        let bv = t.leaf(b.clone(), false);
        let y = t.conv2d(xv, wv, bv, 1, 1).unwrap();
        weighted_sum(t, y, &r)
    }));
    worst = worst.max(check_grad("conv2d/b", &b, |t, bv| {
        let xv = t.leaf(x.clone(), false);
        let wv = t.leaf(w.clone(), false);
        let y = t.conv2d(xv, wv, bv, 1, 1).unwrap();
        weighted_sum(t, y, &r)
    }));

    let xr = x.map(|v| v + 0.21); // avoid relu kinks at the probe step
    worst = worst.max(check_grad("relu", &xr, |t, xv| {
        let y = t.relu(xv);
        let rr = t.leaf(x.clone(), false);
        let p = t.mul(y, rr).unwrap();
        t.sum(p)
    }));
    worst = worst.max(check_grad("maxpool2", &x, |t, xv| {
        let y = t.maxpool2(xv).unwrap();
        t.sum(y)
    }));
    worst = worst.max(check_grad("global_avg_pool", &x, |t, xv| {
        let y = t.global_avg_pool(xv).unwrap();
        t.sum(y)
    }));

    let lx = random_tensor(&[3, 6], &mut rng);
    let lw = random_tensor(&[4, 6], &mut rng);
    let lb = random_tensor(&[4], &mut rng);
    let lr2 = random_tensor(&[3, 4], &mut rng);
    worst = worst.max(check_grad("linear/x", &lx, |t, xv| {
        let wv = t.leaf(lw.clone(), false);
        let bv = t.leaf(lb.clone(), false);
        let y = t.linear(xv, wv, bv).unwrap();
        weighted_sum(t, y, &lr2)
    }));
    worst = worst.max(check_grad("linear/w", &lw, |t, wv| {
        let xv = t.leaf(lx.clone(), false);
        let bv = t.leaf(lb.clone(), false);
        let y = t.linear(xv, wv, bv).unwrap();
        weighted_sum(t, y, &lr2)
    }));
    let logits = random_tensor(&[4, 5], &mut rng);
    worst = worst.max(check_grad("softmax_cross_entropy", &logits, |t, xv| {
        t.softmax_cross_entropy(xv, &[0, 3, 2, 4]).unwrap()
    }));

    // (b) np_forward with frozen noise
    let nx = random_tensor(&[2, 3, 4, 4], &mut rng);
    let nr = random_tensor(&[2, 3, 4, 4], &mut rng);
    let mut noise_rng = stream(1033, "noise");
    let draw: NoiseDraw<f64> =
        sample_noise(&NoiseSpec::gaussian(1.0, 0.75), 2, 3, &mut noise_rng).unwrap();
    let np_field = || PerturbField {
        layout: FieldLayout::PerChannel,
        scale: draw.alpha.clone(),
        coeff: draw
            .beta
            .iter()
            .zip(&draw.alpha)
            .map(|(&bv, &av)| bv - av)
            .collect(),
    };
    worst = worst.max(check_grad("np_forward", &nx, |t, xv| {
        let y = t.mean_perturb(xv, np_field()).unwrap();
        weighted_sum(t, y, &nr)
    }));

    // (c) np_plus_forward with frozen noise and frozen (detached) δ
    let delta = [0.3, 1.0, 0.05];
    let npp_field = || PerturbField {
        layout: FieldLayout::PerChannel,
        scale: draw.alpha.clone(),
        coeff: draw
            .beta
            .iter()
            .zip(&draw.alpha)
            .enumerate()
            .map(|(i, (&bv, &av))| delta[i % 3] * (bv - av))
            .collect(),
    };
    worst = worst.max(check_grad("np_plus_forward", &nx, |t, xv| {
        let y = t.mean_perturb(xv, npp_field()).unwrap();
        weighted_sum(t, y, &nr)
    }));

    // (d) full two-stage miniature with perturbation sites at both stages
    let config = NetworkConfig {
        input_channels: 3,
        input_size: 8,
        stages: vec![StageSpec::new(4, 1), StageSpec::new(8, 1)],
        num_classes: 3,
        np_sites: vec![
            NpSiteConfig::new(1, 1.0, NoiseSpec::gaussian(1.0, 0.75)),
            NpSiteConfig::new(2, 1.0, NoiseSpec::gaussian(1.0, 0.75)),
        ],
    };
    let net = ToyNet::<f64>::new(config, 31).unwrap();
    let images = {
        let data = (0..2 * 3 * 64).map(|_| rng.gen_range(0.05..0.95)).collect();
        Tensor::new(vec![2, 3, 8, 8], data).unwrap()
    };
    let labels = vec![1usize, 2];
    let frozen = SiteRng::from_seed(999);

    let mut tape = Tape::new();
    let xv = tape.leaf(images.clone(), true);
    let mut fr = frozen.clone();
    let out = net.forward_on(&mut tape, xv, true, Some(&mut fr)).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, &labels).unwrap();
    tape.backward(loss).unwrap();

    let analytic_input = tape.grad_tensor(xv).unwrap();
    let numeric_input = finite_difference_grad(
        |probe| {
            let mut t = Tape::new();
            let x = t.leaf(probe.clone(), false);
            let mut fr = frozen.clone();
            let o = net.forward_on(&mut t, x, true, Some(&mut fr)).unwrap();
            let l = t.softmax_cross_entropy(o.logits, &labels).unwrap();
            t.value(l).scalar_value()
        },
        &images,
        1e-5,
    )
    .unwrap();
    let cmp = compare_gradients(&analytic_input, &numeric_input).unwrap();
    assert!(cmp.within(1e-4, 1e-7), "miniature input grad: {}", cmp.max_rel);
    worst = worst.max(cmp.max_rel);

    for (pi, (name, value)) in net.params().enumerate() {
        let analytic = tape.grad_tensor(out.params[pi]).unwrap();
        let numeric = finite_difference_grad(
            |probe| {
                let mut patched = net.cast::<f64>();
                patched.set_param(name, probe.clone()).unwrap();
                let mut t = Tape::new();
                let x = t.leaf(images.clone(), false);
                let mut fr = frozen.clone();
                let o = patched.forward_on(&mut t, x, true, Some(&mut fr)).unwrap();
                let l = t.softmax_cross_entropy(o.logits, &labels).unwrap();
                t.value(l).scalar_value()
            },
            value,
            1e-5,
        )
        .unwrap();
        let cmp = compare_gradients(&analytic, &numeric).unwrap();
        assert!(cmp.within(1e-4, 1e-7), "miniature {name}: {}", cmp.max_rel);
        worst = worst.max(cmp.max_rel);
    }
    println!("[PASS] criterion 3: gradient suite (primitives, perturbations, miniature net), worst rel err {worst:.3e} < 1e-4");
}

// ── criterion 4 ─────────────────────────────────────────────────────

#[test]
fn criterion_04_unbiasedness() {
    let mut rng = stream(1004, "acceptance");
    let x = random_tensor(&[2, 3, 4, 4], &mut rng);
    let stats = channel_mean_std(&x).unwrap();
    let n = 10_000usize;
    let mut acc = vec![0.0f64; x.numel()];
    let mut noise_rng = stream(1044, "noise");
    for _ in 0..n {
        let draw: NoiseDraw<f64> =
            sample_noise(&NoiseSpec::gaussian(1.0, 0.75), 2, 3, &mut noise_rng).unwrap();
        let y = np_core::np::np_forward(&x, &draw).unwrap();
        for (a, &v) in acc.iter_mut().zip(y.data()) {
            *a += v;
        }
    }
    let plane = 16;
    let mut worst_ratio: f64 = 0.0;
    for (i, a) in acc.iter().enumerate() {
        let mc_mean = a / n as f64;
        let bc = i / plane;
        let bound = 5.0 * 0.75 * ((x.data()[i] - stats.mean[bc]).abs() + stats.mean[bc].abs())
            / (n as f64).sqrt();
        let dev = (mc_mean - x.data()[i]).abs();
        assert!(dev < bound, "element {i}: deviation {dev} ≥ bound {bound}");
        worst_ratio = worst_ratio.max(dev / bound);
    }
    println!("[PASS] criterion 4: Monte-Carlo mean within 5σ bound over 10^4 draws (worst dev/bound {worst_ratio:.3})");
}

// ── criterion 5 ─────────────────────────────────────────────────────

#[test]
fn criterion_05_spatial_order_preservation() {
    let mut rng = stream(1005, "acceptance");
    let x = random_tensor(&[2, 4, 5, 5], &mut rng);
    let order = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        idx
    };
    let plane = 25;
    let mut checked = 0usize;
    let mut noise_rng = stream(1055, "noise");
    while checked < 1000 {
        let draw: NoiseDraw<f64> =
            sample_noise(&NoiseSpec::gaussian(1.0, 0.75), 2, 4, &mut noise_rng).unwrap();
        let y = np_core::np::np_forward(&x, &draw).unwrap();
        for bc in 0..8 {
            if draw.alpha[bc] > 0.0 {
                let xs = &x.data()[bc * plane..(bc + 1) * plane];
                let ys = &y.data()[bc * plane..(bc + 1) * plane];
                assert_eq!(order(xs), order(ys), "ranking broken at channel {bc}");
                checked += 1;
            }
        }
    }
    println!("[PASS] criterion 5: within-channel ranking preserved on {checked} positive-α channel draws");
}

// ── criterion 6 ─────────────────────────────────────────────────────

#[test]
fn criterion_06_mmd_correctness() {
    let mut rng = stream(1006, "acceptance");
    for _ in 0..10 {
        let n = rng.gen_range(2..20);
        let d = rng.gen_range(1..6);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        for kernel in [Kernel::Linear, Kernel::rbf_median()] {
            let v = mmd(&x, &x, &kernel).unwrap();
            assert!(v.abs() < 1e-12, "MMD(X,X) = {v} for {kernel:?}");
        }
    }
    for _ in 0..50 {
        let n = rng.gen_range(1..15);
        let m = rng.gen_range(1..15);
        let d = rng.gen_range(1..5);
        let gen = |rows: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect()
        };
        let x = gen(n, &mut rng);
        let y = gen(m, &mut rng);
        let v = mmd(&x, &y, &Kernel::Linear).unwrap();
        let mean = |s: &[Vec<f64>]| -> Vec<f64> {
            let mut out = vec![0.0; d];
            for row in s {
                for (o, &val) in out.iter_mut().zip(row) {
                    *o += val;
                }
            }
            out.iter().map(|o| o / s.len() as f64).collect()
        };
        let (mx, my) = (mean(&x), mean(&y));
        let dist: f64 = mx.iter().zip(&my).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((v - dist).abs() < 1e-10, "linear MMD {v} vs ‖Δmean‖² {dist}");
    }
    println!("[PASS] criterion 6: MMD self-distance < 1e-12 and linear kernel matches ‖Δmean‖² on 50 pairs");
}

// ── criteria 7–11, 13 (shared sweep) ────────────────────────────────

#[test]
fn criterion_07_desk_scale_generalization_headline() {
    let base = aggregate("p0.00");
    let np = aggregate("p0.50");
    for ((name, b), (_, n)) in base.target_accuracies.iter().zip(&np.target_accuracies) {
        assert!(
            n - b >= 3.0 * POINT,
            "{name}: np {n:.4} vs baseline {b:.4} — improvement {:.2} points < 3",
            (n - b) / POINT
        );
    }
    let source_drop = base.source_accuracy - np.source_accuracy;
    assert!(
        source_drop <= 2.0 * POINT,
        "source dropped {:.2} points > 2",
        source_drop / POINT
    );
    let detail: Vec<String> = base
        .target_accuracies
        .iter()
        .zip(&np.target_accuracies)
        .map(|((name, b), (_, n))| format!("{name} +{:.1}", (n - b) / POINT))
        .collect();
    println!(
        "[PASS] criterion 7: perturbation beats baseline on every target ({}), source drop {:.1} points ≤ 2",
        detail.join(", "),
        source_drop / POINT
    );
}

#[test]
fn criterion_08_domain_blending_mmd_reduction() {
    let base = aggregate("p0.00");
    let np = aggregate("p0.50");
    let reduction = (base.final_stage_mmd_fog - np.final_stage_mmd_fog) / base.final_stage_mmd_fog;
    assert!(
        np.final_stage_mmd_fog < base.final_stage_mmd_fog,
        "final-stage MMD did not drop: {} vs {}",
        np.final_stage_mmd_fog,
        base.final_stage_mmd_fog
    );
    assert!(
        reduction >= 0.20,
        "relative reduction {:.1}% < 20%",
        reduction * 100.0
    );
    println!(
        "[PASS] criterion 8: final-stage source↔fog MMD {:.4} → {:.4} (−{:.1}%)",
        base.final_stage_mmd_fog,
        np.final_stage_mmd_fog,
        reduction * 100.0
    );
}

#[test]
fn criterion_09_probability_curve() {
    let base = aggregate("p0.00");
    let mut parts = Vec::new();
    for cell in ["p0.25", "p0.50", "p0.75", "p1.00"] {
        let agg = aggregate(cell);
        assert!(
            agg.target_mean > base.target_mean,
            "{cell}: target mean {:.4} does not exceed baseline {:.4}",
            agg.target_mean,
            base.target_mean
        );
        parts.push(format!("{cell} {:.4}", agg.target_mean));
    }
    println!(
        "[PASS] criterion 9: every p in the grid beats p=0 ({:.4}) on targets: {}",
        base.target_mean,
        parts.join(", ")
    );
}

#[test]
fn criterion_10_noise_type_robustness() {
    let base = aggregate("p0.00");
    let cells = [
        "noise_2B(0.75;0.75)",
        "noise_U(0;2)",
        "noise_G(1;0.5)",
        "noise_G(1;1)",
        "p0.50", // gaussian(1, 0.75)
    ];
    let mut parts = Vec::new();
    for cell in cells {
        let agg = aggregate(cell);
        assert!(
            agg.target_mean > base.target_mean,
            "{cell}: target mean {:.4} vs baseline {:.4}",
            agg.target_mean,
            base.target_mean
        );
        parts.push(format!("{} {:.4}", agg.noise, agg.target_mean));
    }
    println!(
        "[PASS] criterion 10: every noise family beats the baseline {:.4} on targets: {}",
        base.target_mean,
        parts.join(", ")
    );
}

#[test]
fn criterion_11_shallow_placement_wins() {
    let shallow = aggregate("p0.50"); // stages 1+2
    let deep = aggregate("stages_3");
    assert!(
        shallow.target_mean > deep.target_mean,
        "stage 1+2 {:.4} does not beat stage 3 {:.4}",
        shallow.target_mean,
        deep.target_mean
    );
    println!(
        "[PASS] criterion 11: stage-1+2 placement {:.4} beats stage-3 {:.4} on targets",
        shallow.target_mean, deep.target_mean
    );
}

#[test]
fn criterion_13_np_plus_with_augmentation() {
    let np = aggregate("p0.50");
    let np_plus_aug = aggregate("np_plus_aug");
    let diff = np_plus_aug.target_mean - np.target_mean;
    assert!(
        diff >= -0.5 * POINT,
        "np+ with augmentation {:.4} trails plain np {:.4} by more than 0.5 points",
        np_plus_aug.target_mean,
        np.target_mean
    );
    let verdict = if diff >= 0.0 {
        "improves on"
    } else {
        "stays within 0.5 points of"
    };
    println!(
        "[PASS] criterion 13: np+ with augmentation ({:.4}) {verdict} plain np ({:.4})",
        np_plus_aug.target_mean, np.target_mean
    );
}

// ── criterion 12 ────────────────────────────────────────────────────

#[test]
fn criterion_12_sensitivity_ground_truth() {
    for seed in [1u64, 2, 3] {
        let bench = make_benchmark(
            split_seed(seed, "benchmark"),
            BenchmarkSizes {
                train: 8,
                val: 200,
            },
        )
        .unwrap();
        let warm = bench.target("target_warm").unwrap();

        // δ at the stem must put R and B above G
        let stem = ToyNet::<f64>::passthrough_stem().unwrap();
        let report = sensitivity_ranking(&stem, &bench.val, warm, 1).unwrap();
        let top2 = report.top_k(2);
        assert!(
            top2.contains(&0) && top2.contains(&2),
            "seed {seed}: stem top-2 {top2:?} ≠ {{R, B}} (δ {:?})",
            report.delta.delta
        );

        // transferring the top-20% sensitive channels matches the style
        // better than the bottom-80% insensitive ones
        let probe = ToyNet::<f32>::new(
            NetworkConfig {
                input_channels: 3,
                input_size: 32,
                stages: vec![StageSpec::new(16, 1)],
                num_classes: 4,
                np_sites: vec![],
            },
            split_seed(seed, "probe"),
        )
        .unwrap();
        let subset = |ds: &Dataset| Dataset {
            name: ds.name.clone(),
            images: ds.images[..64].to_vec(),
        };
        let content = subset(&bench.val);
        let style = subset(warm);
        let sensitive = channel_subset_transfer(
            &probe,
            &content,
            &style,
            1,
            0.2,
            MaskDirection::MostSensitive,
            &Kernel::Linear,
        )
        .unwrap();
        let insensitive = channel_subset_transfer(
            &probe,
            &content,
            &style,
            1,
            0.8,
            MaskDirection::LeastSensitive,
            &Kernel::Linear,
        )
        .unwrap();
        assert!(
            sensitive.style_match_mmd < insensitive.style_match_mmd,
            "seed {seed}: top-20% mmd {} not below bottom-80% mmd {}",
            sensitive.style_match_mmd,
            insensitive.style_match_mmd
        );
    }
    println!("[PASS] criterion 12: stem δ ranks R,B above G and top-20% sensitive transfer beats bottom-80% (3 seeds)");
}

// ── criterion 14 ────────────────────────────────────────────────────

#[test]
fn criterion_14_training_determinism() {
    use np_cli::commands::cmd_train;
    let make_cfg = |out: &std::path::Path| {
        let mut cfg = ExperimentConfig::load(None).unwrap();
        cfg.seed = 7;
        cfg.out_dir = out.to_path_buf();
        cfg.dataset.sizes = BenchmarkSizes { train: 96, val: 24 };
        cfg.training.epochs = 4;
        cfg
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    cmd_train(&make_cfg(dir_a.path()), dir_a.path(), false).unwrap();
    cmd_train(&make_cfg(dir_b.path()), dir_b.path(), false).unwrap();

    let metrics_a = std::fs::read(dir_a.path().join("metrics.csv")).unwrap();
    let metrics_b = std::fs::read(dir_b.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b, "metrics differ between identical runs");

    let mut blobs = 0;
    for entry in std::fs::read_dir(dir_a.path().join("checkpoint/weights")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(dir_a.path().join("checkpoint/weights").join(&name)).unwrap();
        let b = std::fs::read(dir_b.path().join("checkpoint/weights").join(&name)).unwrap();
        assert_eq!(a, b, "weight blob {name:?} differs");
        blobs += 1;
    }
    println!("[PASS] criterion 14: repeated training run byte-identical (metrics + {blobs} weight blobs)");
}
