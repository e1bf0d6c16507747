//! Acceptance criteria. Each test prints one PASS/FAIL line and then asserts.
//!
//! Tests hold a shared lock so wall-clock limits are measured without other
//! acceptance tests competing for the CPU.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use flowlens::annotations::{Label, PointAnnotation};
use flowlens::components::label;
use flowlens::detection::{
    calibrate_threshold, froc_curve, froc_score, sensitivity_at, Component, ImageDetections, LabelFilter,
};
use flowlens::experiment::{run_experiment, ExperimentConfig, Variant};
use flowlens::flow::{rf_loss, train, train_with, FlowModel, FlowPair, Optimizer, SyntheticLesionPairs, TrainConfig};
use flowlens::phantom::{gen_healthy, inject_lesion, LesionParams, PhantomParams};
use flowlens::rng::derive_seed;
use flowlens::segmetrics::{dice, surface_distances};
use flowlens::stats::wilcoxon_signed_rank;
use flowlens::transport::{reconstruct, score_image, TransportConfig};
use flowlens::{BinaryMask, Geometry};

const REAL_TOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-4;
const FD_REL_FLOOR: f64 = 1e-4;
const FIT_LOSS_RATIO: f64 = 0.01;
const FIT_MAX_ABS: f64 = 0.05;
const CALIBRATION_TOL: f64 = 0.1;
const FROC_LEVELS: [f64; 4] = [0.25, 0.5, 1.0, 1.5];

static LOCK: Mutex<()> = Mutex::new(());

fn verdict(id: u32, name: &str, pass: bool, elapsed: Duration, limit: Option<Duration>, detail: String) {
    let in_time = limit.is_none_or(|l| elapsed < l);
    let ok = pass && in_time;
    let limit_text = limit.map(|l| format!(" (limit {}s)", l.as_secs())).unwrap_or_default();
    // Written to the stdout handle directly so the line survives output capture.
    let _ = writeln!(
        std::io::stdout(),
        "criterion {id} [{}] {name}: {detail}; {:.2}s{limit_text}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    assert!(pass, "criterion {id} failed: {detail}");
    assert!(in_time, "criterion {id} exceeded its time limit");
}

// ---- criterion 1: metric oracles ----

fn random_mask(r: &mut ChaCha8Rng, g: Geometry) -> BinaryMask {
    match r.random_range(0..4) {
        0 if r.random_bool(0.2) => BinaryMask::empty(g),
        0 | 1 => {
            let p: f64 = r.random_range(0.02..0.6);
            BinaryMask::from_fn(g, |_, _| r.random_bool(p))
        }
        _ => {
            let blobs: Vec<(f64, f64, f64)> = (0..r.random_range(1..4))
                .map(|_| (r.random_range(0.0..16.0), r.random_range(0.0..16.0), r.random_range(0.5..4.0)))
                .collect();
            BinaryMask::from_fn(g, |x, y| {
                blobs
                    .iter()
                    .any(|&(cx, cy, rad)| (x as f64 - cx).hypot(y as f64 - cy) <= rad)
            })
        }
    }
}

fn oracle_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&p, &q) in a.pixels().iter().zip(b.pixels()) {
        na += p as usize;
        nb += q as usize;
        inter += (p && q) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

fn oracle_border(m: &BinaryMask) -> Vec<(i64, i64)> {
    let g = m.geometry();
    let (w, h) = (g.width() as i64, g.height() as i64);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if inside(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !inside(x + dx, y + dy)) {
                out.push((x, y));
            }
        }
    }
    out
}

fn oracle_surface(a: &BinaryMask, b: &BinaryMask) -> Option<(f64, f64)> {
    let (ba, bb) = (oracle_border(a), oracle_border(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let s = a.geometry().spacing();
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> Vec<f64> {
        from.iter()
            .map(|&(x, y)| {
                to.iter()
                    .map(|&(u, v)| (((x - u) * (x - u) + (y - v) * (y - v)) as f64).sqrt() * s)
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut d = directed(&ba, &bb);
    d.extend(directed(&bb, &ba));
    d.sort_by(f64::total_cmp);
    let rank = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    let hd95 = d[lo] + (d[hi] - d[lo]) * (rank - lo as f64);
    let asd = d.iter().sum::<f64>() / d.len() as f64;
    Some((hd95, asd))
}

fn flood_fill_components(m: &BinaryMask) -> Vec<Vec<usize>> {
    let g = m.geometry();
    let (w, h) = (g.width() as i64, g.height() as i64);
    let mut seen = vec![false; m.pixels().len()];
    let mut comps = Vec::new();
    for start in 0..m.pixels().len() {
        if !m.pixels()[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y) = ((i as i64) % w, (i as i64) / w);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    if m.pixels()[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps.sort();
    comps
}

#[test]
fn criterion_1_metric_oracles() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut mismatches = Vec::new();
    for case in 0..200 {
        let spacing = [1.0, 0.5, 1.3][case % 3];
        let g = Geometry::new(16, 16, spacing).unwrap();
        let (a, b) = (random_mask(&mut r, g), random_mask(&mut r, g));
        let d = dice(&a, &b).unwrap();
        worst = worst.max((d - oracle_dice(&a, &b)).abs());
        match (surface_distances(&a, &b).unwrap(), oracle_surface(&a, &b)) {
            (Some(s), Some((hd, asd))) => worst = worst.max((s.hd95 - hd).abs()).max((s.asd - asd).abs()),
            (None, None) => {}
            _ => mismatches.push(format!("case {case}: surface definedness differs")),
        }
        for m in [&a, &b] {
            let mut ours = label(m).members;
            ours.sort();
            if ours != flood_fill_components(m) {
                mismatches.push(format!("case {case}: components differ"));
            }
        }
    }
    let pass = worst <= REAL_TOL && mismatches.is_empty();
    verdict(
        1,
        "metric oracle equivalence",
        pass,
        start.elapsed(),
        Some(Duration::from_secs(10)),
        format!("200 mask pairs, max real error {worst:.2e}, {} structural mismatches {:?}", mismatches.len(), mismatches.first()),
    );
}

// ---- criterion 2: gradients ----

#[test]
fn criterion_2_gradient_check() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(202);
    let mut model = FlowModel::new(9, &[16], 2, 7).unwrap();
    assert!(model.num_params() <= 500, "{} parameters", model.num_params());
    let g = Geometry::square(3).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let img = |r: &mut ChaCha8Rng| {
            flowlens::Image2D::new(g, (0..9).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).unwrap()
        };
        let pair = FlowPair::new(img(&mut r), img(&mut r)).unwrap();
        let t: f64 = r.random();
        let (_, analytic) = rf_loss(&model, &pair, t).unwrap();
        for k in 0..model.num_params() {
            let orig = model.params()[k];
            model.params_mut()[k] = orig + FD_STEP;
            let (up, _) = rf_loss(&model, &pair, t).unwrap();
            model.params_mut()[k] = orig - FD_STEP;
            let (down, _) = rf_loss(&model, &pair, t).unwrap();
            model.params_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            // Below the floor, central-difference roundoff at this step size
            // dominates, so the bound becomes an absolute one of 1e-8.
            let scale = analytic[k].abs().max(numeric.abs()).max(FD_REL_FLOOR);
            worst = worst.max((analytic[k] - numeric).abs() / scale);
        }
    }
    verdict(
        2,
        "gradient correctness",
        worst <= FD_REL_TOL,
        start.elapsed(),
        Some(Duration::from_secs(10)),
        format!("{} parameters, 20 draws, max relative error {worst:.2e}", model.num_params()),
    );
}

// ---- criterion 3: single-pair fit ----

#[test]
fn criterion_3_single_pair_fit() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let params = PhantomParams {
        size: 8,
        seed: 33,
        ..PhantomParams::default()
    };
    let healthy = gen_healthy(&params).unwrap();
    let lesion = LesionParams {
        count: (1, 1),
        radius: (1.0, 1.5),
        ..LesionParams::default()
    };
    let lesioned = inject_lesion(&healthy.image, &healthy.brain, &lesion, 5).unwrap();
    let pair = FlowPair::new(lesioned.image.clone(), healthy.image.clone()).unwrap();
    let mean_loss = |m: &FlowModel| (0..=10).map(|k| rf_loss(m, &pair, k as f64 / 10.0).unwrap().0).sum::<f64>() / 11.0;

    let model = FlowModel::new(64, &[32], 4, 9).unwrap();
    let initial = mean_loss(&model);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 2000,
        batch_size: 1,
        t_samples: 1,
        seed: 3,
        optimizer: Optimizer::Momentum { beta: 0.9 },
    };
    let out = train(model, std::slice::from_ref(&pair), &cfg).unwrap();
    let fitted = mean_loss(&out.model);
    let recon = reconstruct(&out.model, &lesioned.image, &TransportConfig::default()).unwrap();
    let max_err = recon
        .pixels()
        .iter()
        .zip(healthy.image.pixels())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let pass = fitted < FIT_LOSS_RATIO * initial && max_err <= FIT_MAX_ABS;
    verdict(
        3,
        "flow fit",
        pass,
        start.elapsed(),
        Some(Duration::from_secs(30)),
        format!(
            "loss {initial:.4} -> {fitted:.2e} (ratio {:.2e}), reconstruction max-abs error {max_err:.4}",
            fitted / initial
        ),
    );
}

// ---- criterion 4: healthy identity ----

#[test]
fn criterion_4_healthy_identity() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let phantom = PhantomParams::default();
    let lesion = LesionParams::default();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let gen = |stream: u64, i: u64| gen_healthy(&phantom.with_seed(derive_seed(seed, stream, i))).unwrap();
        let train_set: Vec<_> = (0..40).map(|i| gen(10, i)).map(|p| (p.image, p.brain)).collect();
        let source = SyntheticLesionPairs {
            images: train_set,
            lesion: lesion.clone(),
            seed: derive_seed(seed, 13, 0),
        };
        let model = FlowModel::new(phantom.size * phantom.size, &[128], 4, derive_seed(seed, 14, 0)).unwrap();
        let cfg = TrainConfig {
            seed: derive_seed(seed, 15, 0),
            ..TrainConfig::default()
        };
        let model = train_with(model, &source, &cfg).unwrap().model;
        let tc = TransportConfig::default();
        let healthy: f64 = (0..10)
            .map(|i| score_image(&model, &gen(11, i).image, &tc).unwrap().mean())
            .sum::<f64>()
            / 10.0;
        let lesioned: f64 = (0..10)
            .map(|i| {
                let p = gen(12, i);
                let l = inject_lesion(&p.image, &p.brain, &lesion, derive_seed(seed, 16, i)).unwrap();
                score_image(&model, &l.image, &tc).unwrap().mean()
            })
            .sum::<f64>()
            / 10.0;
        pass &= healthy < lesioned;
        lines.push(format!("seed {seed}: healthy {healthy:.4} < lesioned {lesioned:.4}"));
    }
    verdict(
        4,
        "healthy identity",
        pass,
        start.elapsed(),
        Some(Duration::from_secs(300)),
        lines.join(", "),
    );
}

// ---- criterion 5: clean vs contaminated ----

#[test]
fn criterion_5_clean_beats_contaminated_on_subtle_findings() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default().with_seed(seed);
        cfg.output_dir = tmp.path().join("run");
        assert_eq!(cfg.dataset.contamination_fraction, 0.5);
        assert_eq!(cfg.train.clean, cfg.train.contaminated);
        let report = run_experiment(&cfg).unwrap();
        let score = |v: Variant| {
            let r = report.variant(v);
            r.detection
                .row(r.calibrated_threshold, LabelFilter::NonLesionalOnly)
                .expect("non-lesional row at the calibrated threshold")
                .score
        };
        let (clean, dirty) = (score(Variant::Clean), score(Variant::Contaminated));
        wins += (clean >= dirty) as usize;
        lines.push(format!("seed {seed}: {clean:.3} vs {dirty:.3}"));
    }
    verdict(
        5,
        "clean >= contaminated non-lesional FROC at calibrated threshold",
        wins >= 2,
        start.elapsed(),
        Some(Duration::from_secs(900)),
        format!("{wins}/3 seeds ({})", lines.join(", ")),
    );
}

// ---- criterion 6: FROC ----

fn oracle_froc_score(images: &[ImageDetections], tol: f64, levels: &[f64]) -> Vec<f64> {
    let matches = |c: &Component, p: &PointAnnotation| {
        let (rx, ry) = (p.x.round(), p.y.round());
        let inside = c.pixels.iter().any(|&(x, y)| x as f64 == rx && y as f64 == ry);
        inside
            || c
                .pixels
                .iter()
                .any(|&(x, y)| ((x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2)).sqrt() <= tol)
    };
    let total: usize = images.iter().map(|im| im.points.len()).sum();
    let mut cutoffs: Vec<f64> = images
        .iter()
        .flat_map(|im| im.components.iter().map(|c| c.confidence))
        .collect();
    cutoffs.push(f64::INFINITY);
    let operating: Vec<(f64, f64)> = cutoffs
        .iter()
        .map(|&cut| {
            let (mut fp, mut hit) = (0usize, 0usize);
            for im in images {
                let kept: Vec<&Component> = im.components.iter().filter(|c| c.confidence >= cut).collect();
                fp += kept.iter().filter(|c| !im.points.iter().any(|p| matches(c, p))).count();
                hit += im.points.iter().filter(|p| kept.iter().any(|c| matches(c, p))).count();
            }
            (fp as f64 / images.len() as f64, hit as f64 / total as f64)
        })
        .collect();
    levels
        .iter()
        .map(|&l| {
            operating
                .iter()
                .filter(|(f, _)| *f <= l)
                .map(|&(_, s)| s)
                .fold(0.0, f64::max)
        })
        .collect()
}

fn random_scenario(r: &mut ChaCha8Rng) -> Vec<ImageDetections> {
    loop {
        let images: Vec<ImageDetections> = (0..r.random_range(1..=10))
            .map(|_| ImageDetections {
                components: (0..r.random_range(0..=8))
                    .map(|_| {
                        let (x0, y0) = (r.random_range(0..14usize), r.random_range(0..14usize));
                        Component {
                            pixels: (0..r.random_range(1..=4))
                                .map(|_| (x0 + r.random_range(0..3), y0 + r.random_range(0..3)))
                                .collect(),
                            // Coarse confidences so ties are common.
                            confidence: r.random_range(1..=6) as f64 / 6.0,
                        }
                    })
                    .collect(),
                points: (0..r.random_range(0..=3))
                    .map(|_| {
                        let label = if r.random_bool(0.5) { Label::Lesion } else { Label::NonLesional };
                        PointAnnotation::new(r.random_range(0.0..16.0), r.random_range(0.0..16.0), label)
                    })
                    .collect(),
            })
            .collect();
        if images.iter().any(|im| !im.points.is_empty()) {
            return images;
        }
    }
}

#[test]
fn criterion_6_froc_correctness() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(606);
    let tol = flowlens::MATCH_TOLERANCE;
    let mut worst = 0.0f64;
    let mut monotone = true;
    for _ in 0..100 {
        let images = random_scenario(&mut r);
        let curve = froc_curve(&images, tol).unwrap();
        monotone &= curve
            .points
            .windows(2)
            .all(|w| w[0].fppi < w[1].fppi && w[0].sensitivity <= w[1].sensitivity);
        let expected = oracle_froc_score(&images, tol, &FROC_LEVELS);
        for (&l, e) in FROC_LEVELS.iter().zip(&expected) {
            worst = worst.max((sensitivity_at(&curve, l) - e).abs());
        }
        let mean = expected.iter().sum::<f64>() / expected.len() as f64;
        worst = worst.max((froc_score(&curve, &FROC_LEVELS).unwrap() - mean).abs());
    }
    let perfect: Vec<ImageDetections> = (0..5)
        .map(|i| ImageDetections {
            components: vec![Component {
                pixels: vec![(i, i), (i + 1, i)],
                confidence: 1.0,
            }],
            points: vec![PointAnnotation::new(i as f64, i as f64, Label::Lesion)],
        })
        .collect();
    let perfect_score = froc_score(&froc_curve(&perfect, tol).unwrap(), &FROC_LEVELS).unwrap();
    let pass = worst <= REAL_TOL && monotone && perfect_score == 1.0;
    verdict(
        6,
        "FROC correctness",
        pass,
        start.elapsed(),
        None,
        format!("100 scenarios, max deviation from brute force {worst:.2e}, monotone {monotone}, perfect detection {perfect_score}"),
    );
}

// ---- criterion 7: calibration ----

#[test]
fn criterion_7_calibration() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(707);
    let maps: Vec<Vec<f64>> = (0..20)
        .map(|_| (0..10_000).map(|_| r.sample(StandardNormal)).collect())
        .collect();
    let pooled: usize = maps.iter().map(Vec::len).sum();
    let t = calibrate_threshold(&maps).unwrap();
    verdict(
        7,
        "mu + 3 sigma calibration",
        pooled >= 100_000 && (t - 3.0).abs() <= CALIBRATION_TOL,
        start.elapsed(),
        None,
        format!("{pooled} standard-normal pixels, threshold {t:.4}"),
    );
}

// ---- criterion 8: Wilcoxon ----

fn oracle_wilcoxon_p(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return 1.0;
    }
    let ranks: Vec<f64> = nz
        .iter()
        .map(|v| {
            let less = nz.iter().filter(|u| u.abs() < v.abs()).count() as f64;
            let equal = nz.iter().filter(|u| u.abs() == v.abs()).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w = w_plus.min(total - w_plus);
    let mut at_most = 0u64;
    for signs in 0u32..(1 << n) {
        let s: f64 = (0..n).filter(|k| signs >> k & 1 == 1).map(|k| ranks[k]).sum();
        if s <= w + 1e-9 {
            at_most += 1;
        }
    }
    (2.0 * at_most as f64 / (1u64 << n) as f64).min(1.0)
}

#[test]
fn criterion_8_wilcoxon_exact() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(808);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let n = r.random_range(1..=12);
        let d: Vec<f64> = (0..n)
            .map(|_| {
                if trial % 2 == 0 {
                    // small integers: ties and zeros
                    r.random_range(-4i32..=4) as f64
                } else {
                    r.sample::<f64, _>(StandardNormal)
                }
            })
            .collect();
        let got = wilcoxon_signed_rank(&d, &vec![0.0; n]).unwrap().p;
        worst = worst.max((got - oracle_wilcoxon_p(&d)).abs());
    }
    let p123 = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap().p;
    verdict(
        8,
        "Wilcoxon exact p",
        worst <= 1e-12 && p123 == 0.25,
        start.elapsed(),
        None,
        format!("1000 trials n <= 12, max deviation from enumeration {worst:.2e}, p(+1,+2,+3) = {p123}"),
    );
}

// ---- criterion 9: determinism ----

fn csv_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_9_determinism() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default().with_seed(9);
    cfg.dataset.n_subjects = 40;
    cfg.train.clean.epochs = 40;
    cfg.train.contaminated.epochs = 40;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        cfg.output_dir = tmp.path().join(name);
        run_experiment(&cfg).unwrap();
        runs.push(csv_files(&cfg.output_dir));
    }
    let identical = runs[0] == runs[1];
    verdict(
        9,
        "determinism",
        identical && !runs[0].is_empty(),
        start.elapsed(),
        None,
        format!("{} CSV files compared, byte-identical {identical}", runs[0].len()),
    );
}
