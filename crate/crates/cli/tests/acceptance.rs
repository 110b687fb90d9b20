//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p kcp-cli --test acceptance`. Exits non-zero when
//! any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use kcp_core::ckpt::{from_bytes, to_bytes};
use kcp_core::data::{idx_from_bytes, synth_dataset, Dataset, SynthSpec};
use kcp_core::distill::fd_loss;
use kcp_core::kcp::{
    cluster_center, portion_at, prune_count, prune_epoch, run_schedule, select_prune_set, DistanceMatrix, PruneState,
};
use kcp_core::nn::{grad_check, grad_check_objective, GradCheckConfig, LayerKind, LayerSpec, ObjectiveValue};
use kcp_core::train::{evaluate, fit, train_epoch, EpochHooks, TrainConfig};
use kcp_core::{Criteria, Error, FinetuneMode, MaskSet, ModelGraph, ModelState, PruneConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn archs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../archs")
}

fn kcp(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_kcp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("kcp {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

// 1

fn flops_anchors() -> Outcome {
    let mut parts = Vec::new();
    for (depth, anchor) in [(20, 4.06e7), (32, 6.89e7), (56, 1.25e8), (110, 2.53e8)] {
        let spec = archs().join(format!("resnet{depth}.json"));
        let t = Instant::now();
        let out = kcp(&["flops", "--arch", &spec.display().to_string(), "--json"])?;
        let secs = t.elapsed().as_secs_f64();
        let v: serde_json::Value = serde_json::from_slice(&out).map_err(|e| e.to_string())?;
        let flops = v["flops"].as_f64().ok_or("no flops field")?;
        let rel = (flops - anchor).abs() / anchor;
        ensure(rel <= 0.02, format!("resnet{depth}: {flops:.3e} vs {anchor:.3e}"))?;
        ensure(secs < 1.0, format!("resnet{depth} took {secs:.2}s"))?;
        parts.push(format!("R{depth} {flops:.3e} ({:+.2}%)", 100.0 * (flops - anchor) / anchor));
    }
    Ok(parts.join(", "))
}

// 2

fn selection_oracle(d: &DistanceMatrix, k: usize, farthest: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.values.len()).collect();
    idx.sort_by(|&a, &b| {
        let c = d.values[a].partial_cmp(&d.values[b]).unwrap();
        let c = if farthest { c.reverse() } else { c };
        c.then(a.cmp(&b))
    });
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

fn selection_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ties = 0;
    for case in 0..1000 {
        let (o, i) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let tied = case % 2 == 0;
        let values: Vec<f64> = (0..o * i)
            .map(|_| {
                if tied {
                    rng.random_range(0..5) as f64 * 0.25
                } else {
                    rng.random_range(0.0..10.0)
                }
            })
            .collect();
        ties += usize::from(tied);
        let d = DistanceMatrix::new(o, i, values).map_err(|e| e.to_string())?;
        let p: f64 = rng.random_range(0.0..=1.0);
        let farthest = rng.random_bool(0.5);
        let (criteria, adv): (Criteria, BTreeSet<usize>) = if farthest {
            (Criteria::Adversarial, [7].into())
        } else {
            (Criteria::Center, BTreeSet::new())
        };
        let got = select_prune_set(&[(7, d.clone())], p, criteria, &adv, false).map_err(|e| e.to_string())?;
        let flat: Vec<usize> = got[0].iter().map(|k| k.out_channel * i + k.in_channel).collect();
        let expected = selection_oracle(&d, prune_count(p, o * i), farthest);
        ensure(flat == expected, format!("case {case}: {o}x{i}, p={p}, farthest={farthest}"))?;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 30.0, format!("took {secs:.1}s"))?;
    Ok(format!("1000 matrices ({ties} with duplicated distances) in {secs:.2}s"))
}

// 3

fn center_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    for case in 0..200 {
        let (o, i) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let w: Tensor<f64> = Tensor::from_fn(&[o, i, k, k], |_| rng.random_range(-1.0..1.0));
        let mu = cluster_center(&w).map_err(|e| e.to_string())?;
        for e in 0..k * k {
            let mut acc = 0.0;
            for n in 0..o {
                for m in 0..i {
                    acc += w.data()[(n * i + m) * k * k + e];
                }
            }
            let expected = acc / (o * i) as f64;
            let rel = (mu.data()[e] - expected).abs() / expected.abs().max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            ensure(rel <= 1e-12, format!("case {case}: rel error {rel:e}"))?;
        }
    }
    let kernel: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut pair = kernel.clone();
    pair.extend(kernel.iter().map(|v| -v));
    let mu = cluster_center(&Tensor::new(vec![2, 1, 3, 3], pair).unwrap()).map_err(|e| e.to_string())?;
    ensure(mu.data().iter().all(|&v| v == 0.0), "center of {K, -K} is not exactly zero")?;
    Ok(format!("200 layers, worst relative error {worst:.1e}; {{K,-K}} gives exact zero"))
}

// 4

fn small_graph(name: &str, input: [usize; 3], classes: usize, layers: Vec<LayerKind>) -> ModelGraph {
    ModelGraph {
        name: name.into(),
        input_shape: input,
        class_count: classes,
        layers: layers.into_iter().map(LayerSpec::from).collect(),
    }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> LayerKind {
    LayerKind::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel_size: k,
        stride,
        padding,
        bias: true,
    }
}

fn linear(i: usize, o: usize) -> LayerKind {
    LayerKind::Linear {
        in_features: i,
        out_features: o,
        bias: true,
    }
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let bn = LayerKind::Batchnorm2d {
        channels: 4,
        epsilon: 1e-5,
        momentum: 0.1,
    };
    let pool = LayerKind::Maxpool2d {
        kernel_size: 2,
        stride: 2,
    };
    let mut resnet = ModelGraph::resnet_cifar(8, 4).map_err(|e| e.to_string())?;
    resnet.input_shape = [3, 8, 8];
    let cases: Vec<(&str, ModelGraph, f64)> = vec![
        ("conv2d", small_graph("conv", [2, 7, 7], 3, vec![conv(2, 4, 3, 2, 1), LayerKind::Flatten, linear(64, 3)]), 1e-4),
        ("relu", small_graph("relu", [2, 5, 5], 3, vec![conv(2, 4, 3, 1, 1), LayerKind::Relu, LayerKind::Flatten, linear(100, 3)]), 1e-4),
        ("maxpool2d", small_graph("pool", [2, 6, 6], 3, vec![conv(2, 3, 3, 1, 1), pool, LayerKind::Flatten, linear(27, 3)]), 1e-4),
        ("global_avg_pool", small_graph("gap", [3, 4, 4], 2, vec![conv(3, 5, 1, 1, 0), LayerKind::GlobalAvgPool, linear(5, 2)]), 1e-4),
        ("batchnorm2d", small_graph("bn", [2, 5, 5], 3, vec![conv(2, 4, 3, 1, 1), bn, LayerKind::Relu, LayerKind::GlobalAvgPool, linear(4, 3)]), 1e-4),
        ("residual_add", resnet, 1e-4),
        ("linear+softmax", small_graph("linear", [2, 3, 3], 4, vec![LayerKind::Flatten, linear(18, 4)]), 1e-6),
    ];
    let mut worst = Vec::new();
    for (i, (kind, g, tol)) in cases.iter().enumerate() {
        let state = ModelState::init(g, i as u64);
        let [c, h, w] = g.input_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(40 + i as u64);
        let batch: Tensor<f64> = Tensor::from_fn(&[3, c, h, w], |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..3).map(|j| j % g.class_count).collect();
        let cfg = GradCheckConfig {
            samples_per_param: 8,
            tolerance: *tol,
            seed: i as u64,
            ..GradCheckConfig::default()
        };
        let r = grad_check(g, &state, &batch, &labels, &cfg).map_err(|e| format!("{kind}: {e}"))?;
        ensure(r.passed(), format!("{kind}: max relative error {:.2e} > {tol:e}", r.max_rel_error))?;
        worst.push(format!("{kind} {:.1e}", r.max_rel_error));
    }
    let kl = kl_gradient_check()?;
    worst.push(format!("kl {kl:.1e}"));
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!("{} in {secs:.1}s", worst.join(", ")))
}

/// Worst relative error of the distillation gradient through a network.
fn kl_gradient_check() -> Result<f64, String> {
    let g = small_graph("fd", [2, 4, 4], 3, vec![LayerKind::Flatten, linear(32, 6), LayerKind::Relu, linear(6, 3)]);
    let state = ModelState::init(&g, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let batch: Tensor<f64> = Tensor::from_fn(&[3, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
    let target: Tensor<f64> = Tensor::from_fn(&[3, 6], |_| rng.random_range(-1.0..1.0));
    let cfg = GradCheckConfig {
        samples_per_param: 10,
        step: 1e-3,
        tolerance: 1e-6,
        ..GradCheckConfig::default()
    };
    let mut worst = 0f64;
    for temperature in [1.0, 15.0] {
        let r = grad_check_objective(&g, &state, &batch, &cfg, |pass| {
            let (loss, grad) = fd_loss(&target, pass.feature(1).unwrap(), temperature)?;
            Ok(ObjectiveValue {
                loss,
                logits_grad: Tensor::zeros(pass.logits().shape()),
                feature_grads: vec![(1, grad)],
            })
        })
        .map_err(|e| e.to_string())?;
        ensure(r.passed(), format!("kl at T={temperature}: {:.2e}", r.max_rel_error))?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

// 5

fn schedule_correctness() -> Outcome {
    let g = ModelGraph::tinycnn([1, 8, 8], 4);
    let data = |seed, n| {
        synth_dataset(&SynthSpec {
            seed,
            n,
            class_count: 4,
            image_size: 8,
            separation: 2.0,
        })
        .unwrap()
    };
    let (train, eval) = (data(1, 256), data(2, 64));
    let tc = TrainConfig {
        epochs: 10,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let cfg = PruneConfig {
        target_sparsity: 0.5,
        epochs: 10,
        ..PruneConfig::default()
    };
    let out = run_schedule(&g, ModelState::init(&g, 0), &train, &eval, &cfg, &tc, None).map_err(|e| e.to_string())?;
    let ps: Vec<f64> = out.report.records.iter().map(|r| r.portion.unwrap_or(f64::NAN)).collect();
    ensure(ps.len() == 10, "expected 10 pruning epochs")?;
    for (e, p) in ps.iter().enumerate() {
        ensure((p - 0.05 * (e + 1) as f64).abs() < 1e-12, format!("epoch {}: p = {p}", e + 1))?;
        ensure(*p == portion_at(&cfg, e + 1), "portion_at disagrees with the run")?;
    }
    for (layer, m) in out.prune_state.masks.iter() {
        let sparsity = m.pruned_count() as f64 / m.len() as f64;
        ensure(
            (sparsity - 0.5).abs() <= 1.0 / m.len() as f64,
            format!("layer {layer}: sparsity {sparsity}"),
        )?;
    }

    let hard = PruneConfig {
        finetune_mode: FinetuneMode::Hard,
        ..cfg.clone()
    };
    let mut state = ModelState::init(&g, 0);
    let mut pstate = PruneState::new(&g, &hard).map_err(|e| e.to_string())?;
    let mut previous: MaskSet = pstate.masks.clone();
    let tc1 = TrainConfig { epochs: 1, ..tc };
    for e in 0..hard.epochs {
        let frozen = pstate.masks.clone();
        let hooks = EpochHooks {
            frozen: Some(&frozen),
            teacher: None,
        };
        train_epoch(&g, &mut state, &train, &tc1, 0, e, hooks).map_err(|e| e.to_string())?;
        prune_epoch(&g, &mut state, &mut pstate, &hard).map_err(|e| e.to_string())?;
        for (layer, m) in pstate.masks.iter() {
            ensure(
                previous.get(layer).unwrap().is_subset_of_pruned(m),
                format!("hard mask of layer {layer} lost a pruned kernel at epoch {}", e + 1),
            )?;
        }
        previous = pstate.masks.clone();
    }
    Ok("p = 0.05..0.50, final per-layer sparsity 0.5 within one kernel, hard masks monotone".into())
}

// 6, 7, 8

const SEPARATION: f64 = 1.25;
const BASELINE_EPOCHS: usize = 10;
const PRUNE_EPOCHS: usize = 20;

struct Fixture {
    graph: ModelGraph,
    train: Dataset,
    eval: Dataset,
    trained: ModelState,
    baseline_accuracy: f64,
    /// Unpruned model after the same extra epochs the pruned runs get.
    reference_accuracy: f64,
    train_config: TrainConfig,
}

impl Fixture {
    fn build() -> Result<Self, String> {
        let synth = |seed, n| {
            synth_dataset(&SynthSpec {
                seed,
                n,
                class_count: 4,
                image_size: 16,
                separation: SEPARATION,
            })
            .map_err(|e| e.to_string())
        };
        let (train, eval) = (synth(1, 4000)?, synth(2, 1000)?);
        let graph = ModelGraph::load(&archs().join("tinycnn.json")).map_err(|e| e.to_string())?;
        let mut state = ModelState::init(&graph, 0);
        let base_cfg = TrainConfig {
            epochs: BASELINE_EPOCHS,
            ..TrainConfig::default()
        };
        fit(&graph, &mut state, &train, &eval, &base_cfg, 0, 0).map_err(|e| e.to_string())?;
        let baseline_accuracy = evaluate(&graph, &state, &eval, 256).map_err(|e| e.to_string())?.accuracy;
        let train_config = TrainConfig {
            epochs: PRUNE_EPOCHS,
            ..TrainConfig::default()
        };
        let mut reference = state.clone();
        let report =
            fit(&graph, &mut reference, &train, &eval, &train_config, 0, 0).map_err(|e| e.to_string())?;
        let reference_accuracy = report.last().map(|r| r.eval_accuracy).unwrap_or(0.0);
        Ok(Self {
            graph,
            train,
            eval,
            trained: state,
            baseline_accuracy,
            reference_accuracy,
            train_config,
        })
    }

    fn prune(&self, criteria: Criteria, fraction: f64, mode: FinetuneMode, seed: u64) -> Result<f64, String> {
        let cfg = PruneConfig {
            target_sparsity: 0.5,
            epochs: PRUNE_EPOCHS,
            criteria,
            adversarial_layer_fraction: fraction,
            finetune_mode: mode,
            seed,
            ..PruneConfig::default()
        };
        let out = run_schedule(&self.graph, self.trained.clone(), &self.train, &self.eval, &cfg, &self.train_config, None)
            .map_err(|e| e.to_string())?;
        Ok(out.report.last().map(|r| r.eval_accuracy).unwrap_or(0.0))
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn accuracy_retention(f: &Fixture, center: f64) -> Outcome {
    ensure(
        f.baseline_accuracy >= 0.95,
        format!("baseline only reached {}", pct(f.baseline_accuracy)),
    )?;
    let drop = f.reference_accuracy - center;
    ensure(
        drop <= 0.03,
        format!("drop {:.2} pp (reference {}, pruned {})", 100.0 * drop, pct(f.reference_accuracy), pct(center)),
    )?;
    Ok(format!(
        "baseline {}, unpruned at same budget {}, pruned (S=0.5, E=20, soft) {}, drop {:.2} pp",
        pct(f.baseline_accuracy),
        pct(f.reference_accuracy),
        pct(center),
        100.0 * drop
    ))
}

fn adversarial_degradation(f: &Fixture, center: f64) -> Outcome {
    let a1 = f.prune(Criteria::Adversarial, 0.1, FinetuneMode::Soft, 0)?;
    let a4 = f.prune(Criteria::Adversarial, 0.4, FinetuneMode::Soft, 0)?;
    let detail = format!("center {}, adversarial 0.1 {}, adversarial 0.4 {}", pct(center), pct(a1), pct(a4));
    ensure(a1 < center && a4 < center, format!("not below center: {detail}"))?;
    ensure(a4 <= a1, format!("not monotone: {detail}"))?;
    Ok(detail)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn soft_vs_hard(f: &Fixture, center_seed0: f64) -> Outcome {
    let mut soft = vec![center_seed0];
    let mut hard = Vec::new();
    for seed in 0..3 {
        if seed > 0 {
            soft.push(f.prune(Criteria::Center, 0.1, FinetuneMode::Soft, seed)?);
        }
        hard.push(f.prune(Criteria::Center, 0.1, FinetuneMode::Hard, seed)?);
    }
    let (ms, mh) = (median(soft.clone()), median(hard.clone()));
    let detail = format!(
        "soft {:?} (median {}), hard {:?} (median {})",
        soft.iter().map(|&a| pct(a)).collect::<Vec<_>>(),
        pct(ms),
        hard.iter().map(|&a| pct(a)).collect::<Vec<_>>(),
        pct(mh)
    );
    ensure(ms >= mh - 0.005, detail.clone())?;
    Ok(detail)
}

// 9

fn distillation_correctness() -> Outcome {
    let t = |shape: &[usize], v: &[f64]| Tensor::new(shape.to_vec(), v.to_vec()).unwrap();
    let x = t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 4.0, -4.0]);
    let (zero, grad) = fd_loss(&x, &x, 15.0).map_err(|e| e.to_string())?;
    ensure(zero == 0.0 && grad.data().iter().all(|&g| g == 0.0), "not zero at equality")?;
    let (two, _) = fd_loss(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[0.0, 1.0]), 1.0).map_err(|e| e.to_string())?;
    ensure((two - 0.4621).abs() <= 1e-4, format!("two-class case {two}"))?;
    let (flat, _) = fd_loss(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[0.0, 1.0]), 1e6).map_err(|e| e.to_string())?;
    ensure(flat <= 1e-9, format!("large-T limit {flat:e}"))?;
    let kl = kl_gradient_check()?;
    Ok(format!("zero at equality, two-class {two:.6}, T=1e6 gives {flat:.1e}, gradient error {kl:.1e}"))
}

// 10

fn determinism_and_formats() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let arch = archs().join("tinycnn.json").display().to_string();
    let data = "synth:11,400,4,16,1.25";
    let run = |name: &str| -> Result<Vec<Vec<u8>>, String> {
        let base = dir.path().join(name);
        let pruned = dir.path().join(format!("{name}-pruned"));
        let b = base.display().to_string();
        kcp(&["train", "--arch", &arch, "--data", data, "--seed", "5", "--epochs", "2", "--out", &b])?;
        kcp(&[
            "prune", &format!("{b}/model.ckpt"), "--data", data, "--seed", "5", "--epochs", "3", "--sparsity", "0.5",
            "--out", &pruned.display().to_string(),
        ])?;
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).map_err(|e| e.to_string());
        Ok(vec![
            read(&base, "model.ckpt")?,
            read(&base, "report.json")?,
            read(&base, "report.csv")?,
            read(&pruned, "pruned.ckpt")?,
            read(&pruned, "report.json")?,
            read(&pruned, "report.csv")?,
        ])
    };
    ensure(run("a")? == run("b")?, "repeated runs differ")?;

    let pruned = std::fs::read(dir.path().join("a-pruned/pruned.ckpt")).map_err(|e| e.to_string())?;
    let ck = from_bytes(&pruned).map_err(|e| e.to_string())?;
    let again = to_bytes(&ck.graph, &ck.state, Some(&ck.masks)).map_err(|e| e.to_string())?;
    ensure(again == pruned, "checkpoint round trip is not bit-exact")?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut rejected = 0;
    let fuzz = catch_unwind(AssertUnwindSafe(|| -> Result<(), String> {
        for case in 0..10_000 {
            let mut b = pruned.clone();
            let truncated = case % 2 == 0;
            if truncated {
                b.truncate(rng.random_range(0..b.len()));
            } else {
                for _ in 0..rng.random_range(1..6) {
                    let i = rng.random_range(0..b.len().min(4096));
                    b[i] = rng.random();
                }
            }
            match from_bytes(&b) {
                Err(Error::Checkpoint(_)) => rejected += 1,
                Err(other) => return Err(format!("checkpoint case {case}: untyped error {other}")),
                Ok(_) if truncated => return Err(format!("checkpoint case {case}: truncation accepted")),
                Ok(_) => {}
            }
        }
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 10, 0, 0, 0, 6, 0, 0, 0, 6];
        images.extend((0..360).map(|i| (i * 7 % 256) as u8));
        let mut labels = vec![0, 0, 8, 1, 0, 0, 0, 10];
        labels.extend(0..10u8);
        idx_from_bytes(&images, &labels, None, "fixture").map_err(|e| e.to_string())?;
        for case in 0..10_000 {
            let (mut im, mut lb) = (images.clone(), labels.clone());
            let truncated = case % 2 == 0;
            let target = if case % 4 < 2 { &mut im } else { &mut lb };
            if truncated {
                let cut = rng.random_range(0..target.len());
                target.truncate(cut);
            } else {
                let i = rng.random_range(0..16.min(target.len()));
                target[i] = rng.random();
            }
            match idx_from_bytes(&im, &lb, None, "fuzz") {
                Err(Error::Idx(_)) => rejected += 1,
                Err(other) => return Err(format!("IDX case {case}: untyped error {other}")),
                Ok(_) if truncated => return Err(format!("IDX case {case}: truncation accepted")),
                Ok(_) => {}
            }
        }
        Ok(())
    }));
    match fuzz {
        Err(_) => return Err("parser panicked during fuzzing".into()),
        Ok(r) => r?,
    }
    Ok(format!(
        "train and prune artifacts byte-identical across runs, round trip bit-exact, 20000 fuzz cases ({rejected} rejected with typed errors, no panics)"
    ))
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(_) => Err("panicked".into()),
        };
        let status = if outcome.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &outcome {
            Ok(d) | Err(d) => d,
        };
        println!("criterion {n:>2} {status} [{:.1}s] {name}: {detail}", t.elapsed().as_secs_f64());
        results.push((n, name, outcome));
    };

    record(1, "FLOPs anchors", &mut flops_anchors);
    record(2, "selection oracle equivalence", &mut selection_equivalence);
    record(3, "cluster-center oracle", &mut center_oracle);
    record(4, "gradient checks", &mut gradient_checks);
    record(5, "schedule correctness", &mut schedule_correctness);

    let t = Instant::now();
    match Fixture::build() {
        Ok(fixture) => {
            println!("fixture: tinycnn on synthetic 4-class data, N=4000, built in {:.1}s", t.elapsed().as_secs_f64());
            let center = fixture.prune(Criteria::Center, 0.1, FinetuneMode::Soft, 0);
            match center {
                Ok(center) => {
                    record(6, "end-to-end accuracy retention", &mut || accuracy_retention(&fixture, center));
                    record(7, "adversarial degradation", &mut || adversarial_degradation(&fixture, center));
                    record(8, "soft >= hard", &mut || soft_vs_hard(&fixture, center));
                }
                Err(e) => {
                    for (n, name) in [(6, "end-to-end accuracy retention"), (7, "adversarial degradation"), (8, "soft >= hard")] {
                        record(n, name, &mut || Err(format!("center run failed: {e}")));
                    }
                }
            }
        }
        Err(e) => {
            for (n, name) in [(6, "end-to-end accuracy retention"), (7, "adversarial degradation"), (8, "soft >= hard")] {
                record(n, name, &mut || Err(format!("fixture failed: {e}")));
            }
        }
    }

    record(9, "distillation correctness", &mut distillation_correctness);
    record(10, "determinism and formats", &mut determinism_and_formats);

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
