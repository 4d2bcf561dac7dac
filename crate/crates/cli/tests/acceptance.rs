//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! A4 to A8 share one compact-profile benchmark: a generated dataset, a
//! trained source model and two full matrix runs.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hitta_core::backbone::SegNetwork;
use hitta_core::checkpoint::save_network;
use hitta_core::datagen::{derive_seed, evaluate_dsc, generate_dataset, load_dataset, train_source, Dataset};
use hitta_core::feedback_adapt::{init_head, post_inference_adapt, DEFAULT_HEAD_HIDDEN};
use hitta_core::harness::{build_stream, run_matrix, MatrixReport, MethodName, RunConfig};
use hitta_core::objectives::{
    cross_entropy_loss_with_grad, divergence_loss_with_grad, divergence_map, feedback_loss,
    prediction_entropy_with_grad, soft_dice_loss_with_grad, DivergenceMap,
};
use hitta_core::pre_adapt::pre_inference_adapt;
use hitta_core::tensor::Tensor;
use hitta_service::client::{drive_oracle, Client};
use hitta_service::{spawn_background, AppState, SessionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, pass: bool, detail: String) -> Outcome {
    let o = Outcome { id, pass, detail };
    println!("{} {}: {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o
}

fn failed(id: &'static str, e: impl std::fmt::Display) -> Outcome {
    outcome(id, false, format!("error: {e}"))
}

// ---------------------------------------------------------------- oracles

fn random_simplex(rng: &mut ChaCha8Rng, n: usize, k: usize, h: usize, w: usize) -> Tensor {
    let logits: Vec<f64> = (0..n * k * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
    softmax(&Tensor::from_vec([n, k, h, w], logits).unwrap())
}

fn softmax(z: &Tensor) -> Tensor {
    let [n, k, h, w] = z.shape();
    let plane = h * w;
    let mut out = z.clone();
    for b in 0..n {
        for p in 0..plane {
            let at = |c: usize| (b * k + c) * plane + p;
            let m = (0..k).map(|c| z.data()[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..k).map(|c| (z.data()[at(c)] - m).exp()).sum();
            for c in 0..k {
                out.data_mut()[at(c)] = (z.data()[at(c)] - m).exp() / s;
            }
        }
    }
    out
}

/// Pulls a gradient on softmax outputs back to the logits.
fn softmax_backward(p: &Tensor, dp: &Tensor) -> Vec<f64> {
    let [n, k, h, w] = p.shape();
    let plane = h * w;
    let mut dz = vec![0.0; p.data().len()];
    for b in 0..n {
        for q in 0..plane {
            let at = |c: usize| (b * k + c) * plane + q;
            let dot: f64 = (0..k).map(|c| p.data()[at(c)] * dp.data()[at(c)]).sum();
            for c in 0..k {
                dz[at(c)] = p.data()[at(c)] * (dp.data()[at(c)] - dot);
            }
        }
    }
    dz
}

fn one_hot(rng: &mut ChaCha8Rng, n: usize, k: usize, h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut t = Tensor::zeros([n, k, h, w]);
    for b in 0..n {
        for p in 0..plane {
            let c = rng.random_range(0..k);
            t.data_mut()[(b * k + c) * plane + p] = 1.0;
        }
    }
    t
}

/// Brute-force per-pixel divergence: mean over predictions of the class-wise
/// Euclidean distance to the mean prediction, both averages over N.
fn brute_force_divergence(preds: &[Vec<Vec<Vec<f64>>>]) -> Vec<Vec<f64>> {
    // indexed preds[n][c][y][x]
    let n = preds.len();
    let k = preds[0].len();
    let h = preds[0][0].len();
    let w = preds[0][0][0].len();
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let mut mean = vec![0.0; k];
            for pred in preds {
                for c in 0..k {
                    mean[c] += pred[c][y][x];
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
            let mut total = 0.0;
            for pred in preds {
                let mut sq = 0.0;
                for c in 0..k {
                    let d = pred[c][y][x] - mean[c];
                    sq += d * d;
                }
                total += sq.sqrt();
            }
            out[y][x] = total / n as f64;
        }
    }
    out
}

fn a1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let n = rng.random_range(2..=5);
        let k = rng.random_range(2..=3);
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=8);
        let mut t = random_simplex(&mut rng, n, k, h, w);
        if trial % 5 == 0 {
            // identical predictions at some pixels
            let plane = h * w;
            for p in (0..plane).step_by(2) {
                for b in 1..n {
                    for c in 0..k {
                        let v = t.data()[c * plane + p];
                        t.data_mut()[(b * k + c) * plane + p] = v;
                    }
                }
            }
        }
        let nested: Vec<Vec<Vec<Vec<f64>>>> = (0..n)
            .map(|b| {
                (0..k)
                    .map(|c| {
                        (0..h)
                            .map(|y| (0..w).map(|x| t.data()[((b * k + c) * h + y) * w + x]).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let reference = brute_force_divergence(&nested);
        let got = match divergence_map(&t) {
            Ok(m) => m,
            Err(e) => return failed("A1", e),
        };
        for (row, want) in got.values.chunks(w).zip(&reference) {
            for (a, b) in row.iter().zip(want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        "A1",
        worst <= 1e-6 && secs < 10.0,
        format!("divergence map vs brute force on 200 inputs: max |diff| {worst:.2e} (tol 1e-6), {secs:.2} s (limit 10 s)"),
    )
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central_diff(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.data().len())
        .map(|i| {
            let v = x.data()[i];
            probe.data_mut()[i] = v + h;
            let up = f(&probe);
            probe.data_mut()[i] = v - h;
            let down = f(&probe);
            probe.data_mut()[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn a2() -> Outcome {
    const SHAPE: [usize; 4] = [2, 3, 4, 4];
    const H: f64 = 1e-6;
    let [n, k, hh, ww] = SHAPE;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = [0.0f64; 5];
    let names = ["soft_dice", "cross_entropy", "divergence", "entropy", "feedback"];
    for _ in 0..10 {
        let p = random_simplex(&mut rng, n, k, hh, ww);
        let t = one_hot(&mut rng, n, k, hh, ww);
        let weight: Vec<f64> = (0..n * hh * ww).map(|_| rng.random_range(0.5..2.0)).collect();
        for wopt in [None, Some(weight.as_slice())] {
            let (_, g) = soft_dice_loss_with_grad(&p, &t, wopt).unwrap();
            let fd = central_diff(&p, H, |q| soft_dice_loss_with_grad(q, &t, wopt).unwrap().0.total);
            worst[0] = worst[0].max(rel_err(g.data(), &fd));
            let (_, g) = cross_entropy_loss_with_grad(&p, &t, wopt).unwrap();
            let fd = central_diff(&p, H, |q| cross_entropy_loss_with_grad(q, &t, wopt).unwrap().0.total);
            worst[1] = worst[1].max(rel_err(g.data(), &fd));
        }

        // divergence and entropy need inputs on the simplex: check in logit space
        for copies in [n, 7] {
            let z = Tensor::from_vec(
                [copies, k, hh, ww],
                (0..copies * k * hh * ww).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let q = softmax(&z);
            let (_, _, dq) = divergence_loss_with_grad(&q).unwrap();
            let fd = central_diff(&z, H, |zz| divergence_loss_with_grad(&softmax(zz)).unwrap().0.total);
            worst[2] = worst[2].max(rel_err(&softmax_backward(&q, &dq), &fd));
        }
        let z = Tensor::from_vec(SHAPE, (0..n * k * hh * ww).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let q = softmax(&z);
        let (_, dq) = prediction_entropy_with_grad(&q).unwrap();
        let fd = central_diff(&z, H, |zz| prediction_entropy_with_grad(&softmax(zz)).unwrap().0.total);
        worst[3] = worst[3].max(rel_err(&softmax_backward(&q, &dq), &fd));

        let y_tilde = random_simplex(&mut rng, n, k, hh, ww);
        let mdiv = DivergenceMap {
            height: hh,
            width: ww,
            values: (0..hh * ww).map(|_| rng.random_range(0.0..0.8)).collect(),
        };
        let fl = feedback_loss(&p, &y_tilde, &t, Some(&mdiv), false).unwrap();
        let fd_main = central_diff(&p, H, |q| feedback_loss(q, &y_tilde, &t, Some(&mdiv), false).unwrap().value.total);
        let fd_pref = central_diff(&y_tilde, H, |q| feedback_loss(&p, q, &t, Some(&mdiv), false).unwrap().value.total);
        worst[4] = worst[4]
            .max(rel_err(fl.grad_main.data(), &fd_main))
            .max(rel_err(fl.grad_pref.data(), &fd_pref));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().copied().fold(0.0, f64::max);
    let parts: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    outcome(
        "A2",
        max < 1e-4 && secs < 30.0,
        format!("relative gradient error vs central differences: {} (tol 1e-4), {secs:.2} s (limit 30 s)", parts.join(", ")),
    )
}

// ---------------------------------------------------------------- benchmark

struct Bench {
    cfg: RunConfig,
    data: Dataset,
    source: SegNetwork,
    val_dsc: f64,
    _dir: tempfile::TempDir,
}

impl Bench {
    fn dataset_path(&self) -> std::path::PathBuf {
        self.cfg.dataset.clone()
    }
}

fn bench() -> hitta_core::Result<Bench> {
    let dir = tempfile::tempdir().map_err(|e| hitta_core::Error::io("tempdir", e))?;
    let mut cfg = RunConfig::compact();
    cfg.dataset = dir.path().join("data");
    cfg.checkpoint = dir.path().join("source.json");
    cfg.out_dir = dir.path().join("matrix");
    generate_dataset(&cfg.data, &cfg.dataset, false)?;
    let data = load_dataset(&cfg.dataset)?;
    let mut source = SegNetwork::new(cfg.arch, cfg.seed)?;
    let start = Instant::now();
    let report = train_source(&mut source, &data, &cfg.train)?;
    let val_dsc = evaluate_dsc(&mut source, &data.source_val(), "R1")?;
    println!(
        "# source model: best epoch {} val DSC {:.4} ({:.1} s)",
        report.best_epoch,
        val_dsc,
        start.elapsed().as_secs_f64()
    );
    save_network(&mut source, &cfg.checkpoint)?;
    Ok(Bench {
        cfg,
        data,
        source,
        val_dsc,
        _dir: dir,
    })
}

fn a3(b: &Bench) -> Outcome {
    let start = Instant::now();
    let run = || -> hitta_core::Result<(usize, usize, bool, bool, bool)> {
        let items = build_stream(&b.data, &b.cfg.target_domains(), b.cfg.seed, true)?;
        let item = &items[0];
        let mut net = b.source.clone();
        let before: Vec<_> = net.named_tensors().into_iter().map(|(n, k, _)| (n, k)).collect();
        let hashes = |net: &mut SegNetwork| -> Vec<String> {
            before.iter().map(|(name, _)| net.hash_where(|n, _| n == name)).collect()
        };
        let h0 = hashes(&mut net);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(b.cfg.seed, &[0xA3]));
        let mut pre = b.cfg.pre.clone();
        pre.steps = 20;
        pre_inference_adapt(&mut net, &item.sample.image, &pre, &mut rng)?;
        let h1 = hashes(&mut net);
        let mut frozen_changed = 0;
        let mut affine_changed = 0;
        for (((_, kind), a), c) in before.iter().zip(&h0).zip(&h1) {
            let affine = kind.is_some_and(|k| k.is_bn_affine());
            if a != c {
                if affine {
                    affine_changed += 1;
                } else {
                    frozen_changed += 1;
                }
            }
        }
        let mut head = init_head(net.feature_channels(), net.arch().num_classes, DEFAULT_HEAD_HIDDEN, 5)?;
        let head0 = head.state_hash();
        let backbone0 = net.state_hash();
        let conv0 = net.hash_where(|_, k| k.is_some_and(|k| !k.is_bn_affine()));
        post_inference_adapt(&mut net, &mut head, &item.sample.image, item.sample.mask(&item.rater)?, &b.cfg.post, &mut rng)?;
        Ok((
            frozen_changed,
            affine_changed,
            net.state_hash() != backbone0,
            net.hash_where(|_, k| k.is_some_and(|k| !k.is_bn_affine())) != conv0,
            head.state_hash() != head0,
        ))
    };
    match run() {
        Ok((frozen, affine, backbone, conv, head)) => {
            let secs = start.elapsed().as_secs_f64();
            outcome(
                "A3",
                frozen == 0 && affine > 0 && backbone && conv && head && secs < 60.0,
                format!(
                    "pre stage: {frozen} non-affine tensors changed, {affine} BN affine tensors changed; \
                     post stage: backbone changed {backbone} (conv weights {conv}), head changed {head}; {secs:.1} s (limit 60 s)"
                ),
            )
        }
        Err(e) => failed("A3", e),
    }
}

fn a4(b: &Bench) -> Outcome {
    let start = Instant::now();
    let items = match build_stream(&b.data, &b.cfg.target_domains(), b.cfg.seed, true) {
        Ok(i) => i,
        Err(e) => return failed("A4", e),
    };
    // 50 samples spread over the four target domains
    let stride = items.len() / 50;
    let mut descended = 0;
    let mut runs = 0;
    for i in 0..50 {
        let item = &items[i * stride];
        let mut net = b.source.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(b.cfg.seed, &[0xA4, i as u64]));
        match pre_inference_adapt(&mut net, &item.sample.image, &b.cfg.pre, &mut rng) {
            Ok(r) => {
                runs += 1;
                if r.final_loss <= r.initial_loss() {
                    descended += 1;
                }
            }
            Err(e) => return failed("A4", e),
        }
    }
    let frac = descended as f64 / runs as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        "A4",
        frac >= 0.9 && secs < 600.0,
        format!(
            "final L_div <= initial in {descended}/{runs} runs ({:.0}%, need >= 90%), {} steps, lr {}, B={}; {secs:.1} s (limit 600 s)",
            100.0 * frac,
            b.cfg.pre.steps,
            b.cfg.pre.lr,
            b.cfg.pre.copies
        ),
    )
}

fn means(m: &MatrixReport, name: MethodName) -> (f64, f64, f64) {
    let a = m.average(name).expect("method evaluated");
    (100.0 * a.r1, 100.0 * a.rstar, 100.0 * a.combined)
}

fn a5(b: &Bench, m: &MatrixReport, secs: f64) -> Outcome {
    let (h1, hs, _) = means(m, MethodName::Hitta);
    let (t1, ts, _) = means(m, MethodName::Tent);
    let (n1, ns, _) = means(m, MethodName::NoTta);
    let pass = b.val_dsc >= 0.90
        && h1 >= t1
        && t1 >= n1
        && h1 - n1 >= 2.0
        && hs - ns >= 5.0
        && hs - ts >= 3.0
        && secs < 3.0 * 3600.0;
    outcome(
        "A5",
        pass,
        format!(
            "source val DSC {:.3} (>= 0.90); vs-R1 hitta {h1:.2} >= tent {t1:.2} >= no_tta {n1:.2}, hitta-no_tta {:+.2} (>= +2); \
             vs-R* hitta-no_tta {:+.2} (>= +5), hitta-tent {:+.2} (>= +3); matrix {secs:.0} s (limit 3 h CPU)",
            b.val_dsc,
            h1 - n1,
            hs - ns,
            hs - ts
        ),
    )
}

fn a6(m: &MatrixReport) -> Outcome {
    let (h1, hs, hc) = means(m, MethodName::Hitta);
    let (_, nhs, _) = means(m, MethodName::HittaNoHf);
    let (_, _, ndc) = means(m, MethodName::HittaNoDiv);
    let (e1, _, _) = means(m, MethodName::HittaEntropyWeight);
    let checks = [
        (hs >= nhs, format!("vs-R* hitta {hs:.2} >= no_hf {nhs:.2}")),
        (hc >= ndc, format!("combined hitta {hc:.3} >= no_div {ndc:.3}")),
        (h1 >= e1, format!("vs-R1 hitta {h1:.2} >= entropy_weight {e1:.2}")),
    ];
    let detail: Vec<String> = checks
        .iter()
        .map(|(ok, s)| format!("{s} [{}]", if *ok { "ok" } else { "violated" }))
        .collect();
    outcome("A6", checks.iter().all(|c| c.0), detail.join("; "))
}

fn a7(first: &MatrixReport, second: &MatrixReport) -> Outcome {
    let csv = first.to_csv() == second.to_csv();
    let json = first.table_json() == second.table_json();
    let summary = first.summary() == second.summary();
    let rows = first.streams == second.streams;
    outcome(
        "A7",
        csv && json && summary,
        format!(
            "two run_matrix executions: table.csv identical {csv}, table.json identical {json}, summary identical {summary} \
             (per-sample rows identical {rows})"
        ),
    )
}

fn a8(b: &Bench, m: &MatrixReport) -> Outcome {
    let start = Instant::now();
    let Some(offline) = m.stream(MethodName::Hitta) else {
        return failed("A8", "matrix has no hitta stream");
    };
    let addr = match spawn_background(AppState::ephemeral()) {
        Ok(a) => a,
        Err(e) => return failed("A8", e),
    };
    let client = Client::new(format!("http://{addr}"));
    let settings = b.cfg.settings();
    let mut session = SessionConfig::new(MethodName::Hitta, b.dataset_path(), &b.cfg.checkpoint);
    session.seed = b.cfg.seed;
    session.domains = b.cfg.target_domains();
    session.shuffle = b.cfg.shuffle;
    session.pre = settings.pre;
    session.post = settings.post;
    session.tent = settings.tent;
    session.correction = settings.correction;
    session.present = settings.present;
    let served = match client.create(&session).and_then(|c| drive_oracle(&client, &c.id, &session)) {
        Ok(r) => r,
        Err(e) => return failed("A8", e),
    };
    let secs = start.elapsed().as_secs_f64();
    let same_len = served.rows.len() == offline.rows.len();
    let mut worst: f64 = 0.0;
    let mut ids_match = same_len;
    for (a, o) in served.rows.iter().zip(&offline.rows) {
        ids_match &= a.sample_id == o.sample_id;
        for (x, y) in [(&a.dsc_r1, &o.dsc_r1), (&a.dsc_rstar, &o.dsc_rstar)] {
            worst = worst.max((x.od - y.od).abs()).max((x.oc - y.oc).abs()).max((x.mean - y.mean).abs());
        }
    }
    outcome(
        "A8",
        ids_match && worst <= 1e-9 && secs < 600.0,
        format!(
            "oracle HTTP client vs run_stream: {} vs {} samples, same order {ids_match}, max per-sample DSC diff {worst:.1e} (tol 1e-9); {secs:.0} s (limit 600 s)",
            served.rows.len(),
            offline.rows.len()
        ),
    )
}

fn timed_matrix(b: &Bench) -> hitta_core::Result<(MatrixReport, Duration)> {
    let start = Instant::now();
    let m = run_matrix(&b.cfg, &b.data, Ok(&b.source))?;
    Ok((m, start.elapsed()))
}

fn main() -> ExitCode {
    let mut all = vec![a1(), a2()];
    match bench() {
        Ok(b) => {
            all.push(a3(&b));
            all.push(a4(&b));
            match timed_matrix(&b) {
                Ok((first, t)) => {
                    print!("{}", first.summary());
                    let _ = first.write(Path::new(&b.cfg.out_dir));
                    all.push(a5(&b, &first, t.as_secs_f64()));
                    all.push(a6(&first));
                    match timed_matrix(&b) {
                        Ok((second, _)) => all.push(a7(&first, &second)),
                        Err(e) => all.push(failed("A7", e)),
                    }
                    all.push(a8(&b, &first));
                }
                Err(e) => {
                    for id in ["A5", "A6", "A7", "A8"] {
                        all.push(failed(id, &e));
                    }
                }
            }
        }
        Err(e) => {
            for id in ["A3", "A4", "A5", "A6", "A7", "A8"] {
                all.push(failed(id, &e));
            }
        }
    }
    let passed = all.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed", all.len());
    if passed == all.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
