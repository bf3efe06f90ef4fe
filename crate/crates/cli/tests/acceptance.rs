//! Acceptance suite. Each criterion prints one `[PASS]`/`[FAIL]` line; the
//! process exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqsp_cli::commands::{cmd_ablate, cmd_infer, cmd_verify, RunOutput};
use vqsp_cli::config::parse_config;
use vqsp_core::autodiff::grad_check;
use vqsp_core::cluster::{partition_tokens, run_inference, Mode};
use vqsp_core::comms::{
    self, latency, BpCoefficients, CommsConfig, DeviceProfile, Method, DEFAULT_ANCHOR_S,
};
use vqsp_core::model::{ClassTokenMode, Input, Model, ModelConfig, ModelKind, Quantization};
use vqsp_core::tensor::{gather_rows, Precision, Tensor};
use vqsp_core::theorem::{
    linearization_order, mc_variance_reduction, theorem1_suite, VarianceReductionConfig,
};
use vqsp_core::train::{
    prepare_model, run_ablation, AblationGrid, Split, SyntheticTask, TaskKind, TotalLoss, TrainConfig,
};
use vqsp_core::vq::{kmeans, Codebook, EmaConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn vit(layers: u64, groups: u64) -> CommsConfig {
    CommsConfig {
        layers,
        groups,
        codebook_size: 1024,
        ..Default::default()
    }
}

fn bit_accounting() -> Outcome {
    let cases = [
        (12, 1, 120, Ratio::new(12288, 5)),
        (12, 16, 1920, Ratio::new(768, 5)),
        (12, 32, 3840, Ratio::new(384, 5)),
        (24, 1, 240, Ratio::new(16384, 5)),
    ];
    for (l, g, bits, ratio) in cases {
        // the 24-layer row is the D=1024 shape
        let c = CommsConfig {
            hidden: if l == 24 { 1024 } else { 768 },
            ..vit(l, g)
        };
        let got = comms::bits_per_token(&c, Method::Astra);
        if got != Ratio::from_integer(bits) {
            return Err(format!("L={l} G={g}: {got} bits, want {bits}"));
        }
        let r = comms::compression_ratio(&c).map_err(|e| e.to_string())?;
        if r != ratio {
            return Err(format!("L={l} G={g}: ratio {r}, want {ratio}"));
        }
    }
    Ok("120/1920/3840/240 bits; ratios 2457.6/153.6/76.8/3276.8".into())
}

fn random_codebooks(m: &mut Model, rng: &mut ChaCha8Rng) {
    let c = m.config;
    let sub = c.hidden / c.groups;
    m.codebooks = (0..c.layers)
        .map(|l| {
            let cents = (0..c.groups * c.codebook_size * sub).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            Codebook::from_centroids(l as u32, c.groups, c.codebook_size, sub, cents, EmaConfig::default()).unwrap()
        })
        .collect();
}

fn random_embeddings(rng: &mut ChaCha8Rng, t: usize, dim: usize) -> Input {
    let data = (0..t * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Input::Embeddings(Tensor::matrix(t, dim, data, Precision::F32).unwrap())
}

fn ledger_vs_model() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..20 {
        let layers = rng.random_range(1..=4);
        let groups = [1, 2, 4, 8][rng.random_range(0..4)];
        let k = rng.random_range(1..=300);
        let n = rng.random_range(1..=6);
        let t = rng.random_range(n..=40);
        let cfg = ModelConfig {
            layers,
            hidden: 8,
            heads: 2,
            mlp_ratio: 2,
            kind: ModelKind::Classifier { input_dim: 4, classes: 3 },
            max_tokens: t,
            codebook_size: k,
            groups,
            cls_mode: ClassTokenMode::Distributed,
            precision: Precision::F32,
        };
        let mut m = Model::new(cfg, rng.random()).map_err(|e| e.to_string())?;
        random_codebooks(&mut m, &mut rng);
        let input = random_embeddings(&mut rng, t, 4);
        let plan = partition_tokens(t, n).map_err(|e| e.to_string())?;
        let out = run_inference(&m, &input, &plan, Mode::Classify, 2).map_err(|e| e.to_string())?;
        let model_bits = comms::bits_per_token(
            &CommsConfig {
                layers: layers as u64,
                codebook_size: k as u64,
                groups: groups as u64,
                devices: n as u64,
                tokens: t as u64,
                ..Default::default()
            },
            if n == 1 { Method::Single } else { Method::Astra },
        );
        let ledger_bits = out.ledger.per_token_bits(t);
        if ledger_bits != model_bits {
            return Err(format!("config {i} (L={layers} G={groups} K={k} N={n} T={t}): ledger {ledger_bits} vs model {model_bits}"));
        }
    }
    Ok("20 configs exact".into())
}

fn identity_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let (mut sharded, mut lossy_differs) = (0, 0);
    for i in 0..100 {
        let causal = i % 2 == 1;
        let n = [1, 2, 4][rng.random_range(0..3)];
        let t = rng.random_range(n.max(2)..=32);
        let hidden = [4, 8, 12, 16][rng.random_range(0..4)];
        let layers = rng.random_range(1..=3);
        let kind = if causal {
            ModelKind::Decoder { vocab: 16 }
        } else {
            ModelKind::Classifier { input_dim: 4, classes: 3 }
        };
        let cfg = ModelConfig {
            layers,
            hidden,
            heads: 2,
            mlp_ratio: 2,
            kind,
            max_tokens: t + 1,
            codebook_size: 2,
            groups: 1,
            cls_mode: ClassTokenMode::Distributed,
            precision: Precision::F32,
        };
        let mut m = Model::new(cfg, rng.random()).map_err(|e| e.to_string())?;
        let input = if causal {
            Input::Tokens((0..t).map(|_| rng.random_range(0..16)).collect())
        } else {
            random_embeddings(&mut rng, t, 4)
        };
        let reference = m
            .logits(&input, &partition_tokens(t, 1).unwrap(), Quantization::Exact)
            .map_err(|e| e.to_string())?;
        m.set_identity_codebooks(&input).map_err(|e| e.to_string())?;
        let plan = partition_tokens(t, n).unwrap();
        let (got, want) = if causal {
            let out = run_inference(&m, &input, &plan, Mode::Generate { steps: 1 }, 1).map_err(|e| e.to_string())?;
            (out.logits, gather_rows(&reference, &[t - 1]).unwrap())
        } else {
            (m.classify(&input, &plan).map_err(|e| e.to_string())?, reference)
        };
        let diff = got.max_abs_diff(&want);
        worst = worst.max(diff);
        if n > 1 {
            // control: lossy codebooks must show up in the output
            sharded += 1;
            let mut lossy = m.clone();
            random_codebooks(&mut lossy, &mut rng);
            let out = if causal {
                run_inference(&lossy, &input, &plan, Mode::Generate { steps: 1 }, 1).map_err(|e| e.to_string())?.logits
            } else {
                lossy.classify(&input, &plan).map_err(|e| e.to_string())?
            };
            if out.max_abs_diff(&want) > 1e-4 {
                lossy_differs += 1;
            }
        }
        if !(diff < 1e-5) {
            return Err(format!("instance {i} (T={t} D={hidden} L={layers} N={n} causal={causal}): diff {diff:e}"));
        }
    }
    check(
        lossy_differs == sharded,
        format!("100 instances ({sharded} sharded), max abs diff {worst:.2e}"),
        format!("lossy control matched the oracle in {} of {sharded} sharded instances", sharded - lossy_differs),
    )
}

fn gradient_check() -> Outcome {
    let task = SyntheticTask {
        train_size: 16,
        val_size: 16,
        ..SyntheticTask::blob(8, 3, 4, 1)
    };
    let mcfg = ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        mlp_ratio: 2,
        kind: task.model_kind(),
        max_tokens: 8,
        codebook_size: 8,
        groups: 1,
        cls_mode: ClassTokenMode::Distributed,
        precision: Precision::F64,
    };
    let cfg = TrainConfig {
        beta: 0.05,
        lambda: 0.5,
        devices: 2,
        ..Default::default()
    };
    let model = prepare_model(&task, mcfg, &cfg).map_err(|e| e.to_string())?;
    let batch = task.generate(Split::Train).map_err(|e| e.to_string())?;
    let plan = partition_tokens(8, 2).unwrap();
    let f = TotalLoss {
        model: &model,
        batch: &batch[..2],
        plan: &plan,
        cfg: &cfg,
        step: 1,
    };
    let rep = grad_check(&f, &model.params, 1e-5).map_err(|e| e.to_string())?;
    check(
        rep.max_rel_error < 1e-4,
        format!("{} entries, max rel err {:.2e}", rep.checked, rep.max_rel_error),
        format!("max rel err {:.2e} at {:?}", rep.max_rel_error, rep.worst),
    )
}

fn theorem1() -> Outcome {
    let rep = theorem1_suite(200, 8, 5).map_err(|e| e.to_string())?;
    let (v, id) = (rep.violations(), rep.max_mean_identity_error());
    check(
        rep.instances.len() == 200 && v == 0 && id <= 1e-10,
        format!("200 instances, 0 violations, identity err {id:.1e}"),
        format!("{v} violations, identity err {id:.1e}"),
    )
}

fn theorem2() -> Outcome {
    let mut parts = Vec::new();
    for n in [1usize, 2, 4, 8] {
        let cfg = VarianceReductionConfig {
            devices: n,
            trials: 10_000,
            sigma_k: 1e-3,
            sigma_v: 1e-3,
            seed: 6,
            ..Default::default()
        };
        let r = mc_variance_reduction(&cfg).map_err(|e| e.to_string())?;
        let ok = if n == 1 { r.ratio == 1.0 } else { r.relative_error() <= 0.2 };
        parts.push(format!("N={n}: {:.4}", r.ratio));
        if !ok {
            return Err(format!("N={n}: ratio {} vs {}", r.ratio, 1.0 / n as f64));
        }
    }
    Ok(parts.join(", "))
}

fn linearization() -> Outcome {
    let rep = linearization_order(100, 8, 1e-2, 7).map_err(|e| e.to_string())?;
    let r = rep.mean_ratio();
    check(
        rep.ratios.len() == 100 && (3.5..=4.5).contains(&r),
        format!("mean residual ratio {r:.4}"),
        format!("mean residual ratio {r:.4}"),
    )
}

fn latency_trends() -> Outcome {
    let bp = BpCoefficients::default();
    let bws = [10.0, 20.0, 50.0, 100.0, 200.0, 500.0];
    let base = vit(12, 1);
    // (a) for a spread of positive calibrations
    for anchor in [1e-3, 0.05, DEFAULT_ANCHOR_S, 2.0, 50.0] {
        let p = DeviceProfile::calibrated(anchor, 12, 768, 1024);
        let speedups: Vec<f64> = bws
            .iter()
            .map(|&bw| {
                let c = CommsConfig { bandwidth_bps: bw * 1e6, ..base };
                latency(&c, Method::Sp, &p, &bp).total_s / latency(&c, Method::Astra, &p, &bp).total_s
            })
            .collect();
        if speedups.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("(a) anchor {anchor}s: speedup over SP not monotone: {speedups:?}"));
        }
    }
    // (b) comm-only limit
    let zero = DeviceProfile { seconds_per_flop: 0.0 };
    for g in [1, 16, 32] {
        let c = CommsConfig { bandwidth_bps: 10e6, ..vit(12, g) };
        let ratio = latency(&c, Method::Sp, &zero, &bp).total_s / latency(&c, Method::Astra, &zero, &bp).total_s;
        let cr = comms::compression_ratio(&c).map_err(|e| e.to_string())?;
        let cr = *cr.numer() as f64 / *cr.denom() as f64;
        // both sides are one correctly rounded division away from the same rational
        if (ratio - cr).abs() > 4.0 * f64::EPSILON * cr {
            return Err(format!("(b) G={g}: time ratio {ratio} vs compression {cr}"));
        }
    }
    // (c)
    let p = DeviceProfile::vit_base();
    let c = CommsConfig { bandwidth_bps: 10e6, ..base };
    let frac = |m| latency(&c, m, &p, &bp).comm_fraction();
    let baselines = [Method::Sp, Method::Tp, Method::BpAg { nb: 1 }, Method::BpSp { nb: 1 }];
    let min_base = baselines.iter().map(|&m| frac(m)).fold(f64::INFINITY, f64::min);
    let astra = frac(Method::Astra);
    check(
        min_base > 0.58 && astra < 0.5,
        format!("monotone; comm-only ratio exact; comm fraction baselines >= {min_base:.4}, astra {astra:.4}"),
        format!("(c) baseline min comm fraction {min_base:.4}, astra {astra:.4}"),
    )
}

fn ablation_direction() -> Outcome {
    let mut task = SyntheticTask {
        train_size: 256,
        ..SyntheticTask::blob(16, 4, 8, 1)
    };
    if let TaskKind::BlobClassify { noise, .. } = &mut task.kind {
        *noise = 0.8;
    }
    let model = ModelConfig {
        layers: 2,
        hidden: 32,
        heads: 4,
        mlp_ratio: 2,
        kind: task.model_kind(),
        max_tokens: 16,
        codebook_size: 4,
        groups: 1,
        cls_mode: ClassTokenMode::Distributed,
        precision: Precision::F32,
    };
    let grid = AblationGrid {
        task,
        model,
        base: TrainConfig {
            epochs: 10,
            devices: 4,
            ..Default::default()
        },
        lambdas: vec![0.0, 1.0],
        betas: vec![5e-4],
        cls_modes: vec![ClassTokenMode::Single, ClassTokenMode::Distributed],
        groups: vec![1],
        seeds: (0..5).collect(),
    };
    let res = run_ablation(&grid).map_err(|e| e.to_string())?;
    let mean = |f: &dyn Fn(&vqsp_core::train::AblationRow) -> Option<f64>| {
        let v: Vec<f64> = res.rows.iter().filter_map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let single = mean(&|r| (r.cls_mode == ClassTokenMode::Single).then_some(r.val_metric));
    let dist = mean(&|r| (r.cls_mode == ClassTokenMode::Distributed).then_some(r.val_metric));
    let gap0 = mean(&|r| (r.cls_mode == ClassTokenMode::Distributed && r.lambda == 0.0).then_some(r.gap()));
    let gap1 = mean(&|r| (r.cls_mode == ClassTokenMode::Distributed && r.lambda == 1.0).then_some(r.gap()));
    let pooled0 = mean(&|r| (r.lambda == 0.0).then_some(r.gap()));
    let pooled1 = mean(&|r| (r.lambda == 1.0).then_some(r.gap()));
    let msg = format!(
        "val acc distributed {dist:.4} vs single {single:.4}; distributed gap λ=1 {gap1:.4} vs λ=0 {gap0:.4} \
         (all modes {pooled1:.4} vs {pooled0:.4})"
    );
    check(dist >= single && gap1 <= gap0, msg.clone(), msg)
}

fn csvs(out: &RunOutput) -> Vec<(String, Vec<u8>)> {
    out.files.iter().filter(|(n, _)| n.ends_with(".csv")).cloned().collect()
}

fn determinism() -> Outcome {
    let base = "schema_version = 1\n\
        [infer]\ndevices = 4\ntokens = 64\n\
        [verify]\ntheorem1_instances = 50\ntrials = 2000\nbound_instances = 4\nbound_samples = 2000\n\
        [task]\ntrain_size = 64\nval_size = 64\n\
        [train]\nepochs = 2\n\
        [ablate]\nlambdas = [0.0, 1.0]\nseeds = [0, 1]\n";
    let mut checked = 0;
    for (name, cmd) in [
        ("infer", cmd_infer as fn(&_) -> _),
        ("verify", cmd_verify),
        ("ablate", cmd_ablate),
    ] {
        let mut runs = Vec::new();
        for threads in [1, 4, 1] {
            let cfg = parse_config(base, &[format!("threads={threads}")]).map_err(|e| e.to_string())?;
            let out = cmd(&cfg).map_err(|e| format!("{name}: {e}"))?;
            runs.push(csvs(&out));
        }
        if runs[0].is_empty() {
            return Err(format!("{name}: no CSV output"));
        }
        if runs.iter().any(|r| r != &runs[0]) {
            return Err(format!("{name}: CSV bytes differ across reruns or thread counts"));
        }
        checked += runs[0].len();
    }
    Ok(format!("{checked} CSVs identical over threads 1/4/1"))
}

fn vq_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // brute-force nearest centroid
    for _ in 0..50 {
        let (g, sd) = ([1, 2, 4][rng.random_range(0..3)], rng.random_range(1..=4));
        let k = rng.random_range(1..=64);
        let cents: Vec<f32> = (0..g * k * sd).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let cb = Codebook::from_centroids(0, g, k, sd, cents.clone(), EmaConfig::default()).map_err(|e| e.to_string())?;
        let m = 16;
        let x = Tensor::matrix(m, g * sd, (0..m * g * sd).map(|_| rng.random_range(-1.2..1.2)).collect(), Precision::F64).unwrap();
        let (q, _) = cb.quantize(&x).map_err(|e| e.to_string())?;
        for t in 0..m {
            for grp in 0..g {
                let sub = &x.row(t)[grp * sd..(grp + 1) * sd];
                let dist = |j: usize| -> f64 {
                    let c = &cents[(grp * k + j) * sd..(grp * k + j + 1) * sd];
                    sub.iter().zip(c).map(|(a, &b)| (a - b as f64).powi(2)).sum()
                };
                let best = (0..k).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
                if q.token(t)[grp] as usize != best {
                    return Err(format!("nearest mismatch: K={k} G={g} token {t} group {grp}"));
                }
            }
        }
    }
    // k-means distortion per iteration
    for seed in 0..20 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, k) = (r.random_range(20..200), r.random_range(1..6), r.random_range(2..12));
        let pts: Vec<f64> = (0..m * d).map(|_| r.random_range(-3.0..3.0)).collect();
        let res = kmeans(&pts, d, k, 30, &mut r).map_err(|e| e.to_string())?;
        if res.distortion.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            return Err(format!("k-means seed {seed}: distortion rose {:?}", res.distortion));
        }
    }
    // EMA on two stationary clusters
    let pts = [[0.0, 0.0], [0.2, 0.4], [5.0, 5.0], [5.4, 4.8], [4.9, 5.3]];
    let x = Tensor::matrix(5, 2, pts.concat(), Precision::F64).unwrap();
    let mut cb = Codebook::from_centroids(0, 1, 2, 2, vec![1.0, 1.0, 4.0, 4.0], EmaConfig::default()).unwrap();
    for _ in 0..3000 {
        let (q, _) = cb.quantize(&x).unwrap();
        cb.ema_update(&x, &q).map_err(|e| e.to_string())?;
    }
    let means = [[0.1, 0.2], [15.3 / 3.0, 15.1 / 3.0]];
    let ema_err = (0..2)
        .flat_map(|k| (0..2).map(move |j| (k, j)))
        .map(|(k, j)| (cb.centroid(0, k)[j] as f64 - means[k][j]).abs())
        .fold(0.0, f64::max);
    if ema_err >= 1e-3 {
        return Err(format!("EMA error {ema_err:e}"));
    }
    // serialization round trip
    let bytes = cb.to_bytes();
    let (back, used) = Codebook::from_bytes(&bytes).map_err(|e| e.to_string())?;
    check(
        used == bytes.len() && back.to_bytes() == bytes && back.centroids() == cb.centroids(),
        format!("nearest/k-means/EMA ({ema_err:.1e})/round trip ok"),
        "serialization round trip changed bytes".into(),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 11] = [
        ("1 bit accounting", bit_accounting, Duration::from_secs(1)),
        ("2 ledger = comms model", ledger_vs_model, Duration::from_secs(10)),
        ("3 identity-quantization oracle", identity_oracle, Duration::from_secs(30)),
        ("4 gradient check", gradient_check, Duration::from_secs(60)),
        ("5 theorem 1 suite", theorem1, Duration::from_secs(10)),
        ("6 theorem 2 suite", theorem2, Duration::from_secs(60)),
        ("7 linearization order", linearization, Duration::from_secs(5)),
        ("8 latency trends", latency_trends, Duration::from_secs(5)),
        ("9 ablation direction", ablation_direction, Duration::from_secs(900)),
        ("10 determinism", determinism, Duration::from_secs(120)),
        ("11 vq suite", vq_suite, Duration::from_secs(30)),
    ];
    let mut failed = 0;
    for (name, f, budget) in criteria {
        let start = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let (tag, detail) = match &res {
            Ok(d) if took <= budget => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; took {took:.1?}, budget {budget:?}")),
            Err(d) => ("FAIL", d.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("[{tag}] {name}: {detail} ({:.2}s)", took.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
