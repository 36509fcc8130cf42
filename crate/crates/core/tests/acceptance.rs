//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Set `ACCEPTANCE_ONLY=1,4` to run a subset.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saliency_core::bundle::ModelBundle;
use saliency_core::config::{PipelineConfig, SplitRatios};
use saliency_core::crf::{crf_refine, CrfBackend, CrfParams, PROB_EPS};
use saliency_core::dataset::{check_annotations, majority_gt, CONSISTENCY_THRESHOLD};
use saliency_core::fusion::{fit_fusion, RIDGE};
use saliency_core::handcrafted::{
    chi_square, descriptor, pseudo_background, FilterBank, Histogram, ImageFeatures, BACKGROUND_THRESHOLD, BORDER,
};
use saliency_core::imaging::{hsv_of, lab_of, luma_of, BinaryMask, RasterImage, SaliencyMap};
use saliency_core::metrics::{adaptive_prf, auc, evaluate, image_curve, mae, max_f, BETA2};
use saliency_core::mlp::{sample_gradient, MlpModel, TrainingSample};
use saliency_core::pipeline::{infer, infer_prepared, prepare_image, split_dataset, train, LabeledImage, ModelKind, SegmentCache, TrainOptions};
use saliency_core::segmentation::{build_stack, level_target, Segmentation};
use saliency_core::synth::{synth_dataset, SynthParams};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn synth_items(n: usize, seed: u64) -> Vec<LabeledImage> {
    synth_dataset(n, seed, &SynthParams::default())
        .expect("synthetic data")
        .into_iter()
        .map(|s| LabeledImage { id: s.id, image: s.image, gt: s.gt })
        .collect()
}

// ---------------------------------------------------------------- 1

fn mlp_loss(model: &MlpModel, s: &TrainingSample) -> f64 {
    let (p, _) = model.forward(&s.features).unwrap();
    (p - s.label).powi(2)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut params = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let input = rng.gen_range(4..12);
        let (h1, h2) = (rng.gen_range(3..10), rng.gen_range(3..10));
        let model = MlpModel::seeded(input, h1, h2, seed);
        let x: Vec<f64> = (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sample = TrainingSample::new(x, (seed % 2) as f64);
        let analytic = sample_gradient(&model, &sample).map_err(|e| e.to_string())?;
        let flat = model.flat_params();
        for i in 0..flat.len() {
            let mut up = flat.clone();
            up[i] += step;
            let mut down = flat.clone();
            down[i] -= step;
            let fu = mlp_loss(&MlpModel::from_flat(input, h1, h2, &up).unwrap(), &sample);
            let fd = mlp_loss(&MlpModel::from_flat(input, h1, h2, &down).unwrap(), &sample);
            let numeric = (fu - fd) / (2.0 * step);
            let gap = (numeric - analytic[i]).abs();
            let scale = numeric.abs().max(analytic[i].abs());
            // Vanishing gradients leave only finite-difference noise.
            if scale > 1e-8 {
                worst = worst.max(gap / scale);
            } else {
                worst_abs = worst_abs.max(gap);
            }
        }
        params += flat.len();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-5, || format!("max relative error {worst:.3e} > 1e-5"))?;
    ensure(worst_abs <= 1e-8, || format!("vanishing gradient off by {worst_abs:.3e}"))?;
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("20 pairs, {params} parameters, max relative error {worst:.2e}, {secs:.2}s"))
}

// ---------------------------------------------------------------- 2

/// Mean field written out with both label distributions and every pair.
fn crf_oracle(img: &RasterImage, init: &[f64], p: &CrfParams) -> Vec<f64> {
    let (w, n) = (img.width(), init.len());
    let prior: Vec<[f64; 2]> = init
        .iter()
        .map(|&s| {
            let s = s.clamp(PROB_EPS, 1.0 - PROB_EPS);
            [1.0 - s, s]
        })
        .collect();
    let mut q = prior.clone();
    for _ in 0..p.iterations {
        let mut next = vec![[0.0; 2]; n];
        for i in 0..n {
            let mut cost = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dx = (i % w) as f64 - (j % w) as f64;
                let dy = (i / w) as f64 - (j / w) as f64;
                let (a, b) = (img.pixels()[i], img.pixels()[j]);
                let c2: f64 = (0..3).map(|c| (a[c] as f64 - b[c] as f64).powi(2)).sum();
                let d2 = dx * dx + dy * dy;
                let k = p.w1 * (-d2 / (2.0 * p.sigma_alpha.powi(2)) - c2 / (2.0 * p.sigma_beta.powi(2))).exp()
                    + p.w2 * (-d2 / (2.0 * p.sigma_gamma.powi(2))).exp();
                for l in 0..2 {
                    cost[l] += k * q[j][1 - l];
                }
            }
            let u = [prior[i][0] * (-cost[0]).exp(), prior[i][1] * (-cost[1]).exp()];
            next[i] = [u[0] / (u[0] + u[1]), u[1] / (u[0] + u[1])];
        }
        q = next;
    }
    q.iter().map(|v| v[1]).collect()
}

fn criterion_2() -> Outcome {
    let paper = CrfParams {
        w1: 3.0,
        w2: 5.0,
        sigma_alpha: 3.0,
        sigma_beta: 50.0,
        sigma_gamma: 3.0,
        ..CrfParams::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..25u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let img = RasterImage::from_fn(6, 6, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap();
        let init = SaliencyMap::new(6, 6, (0..36).map(|_| rng.gen()).collect()).unwrap();
        let want = crf_oracle(&img, init.values(), &paper);
        for backend in [CrfBackend::Exact, CrfBackend::Windowed] {
            let got = crf_refine(&img, &init, &CrfParams { backend, ..paper.clone() }).map_err(|e| e.to_string())?;
            for (a, b) in got.values().iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
        let silent = CrfParams { w1: 0.0, w2: 0.0, ..paper.clone() };
        let same = crf_refine(&img, &init, &silent).map_err(|e| e.to_string())?;
        for (a, b) in same.values().iter().zip(init.values()) {
            ensure(*a == b.clamp(PROB_EPS, 1.0 - PROB_EPS), || {
                format!("seed {seed}: zero pairwise changed {b} to {a}")
            })?;
        }
    }
    ensure(worst <= 1e-10, || format!("max marginal gap {worst:.3e} > 1e-10"))?;
    Ok(format!("25 images, both backends, max gap {worst:.2e}; zero pairwise exact"))
}

// ---------------------------------------------------------------- 3

fn objective(rows: &[Vec<f64>], y: &[f64], a: &[f64]) -> f64 {
    let data: f64 = rows
        .iter()
        .zip(y)
        .map(|(r, t)| (t - r.iter().zip(a).map(|(g, w)| g * w).sum::<f64>()).powi(2))
        .sum();
    data + RIDGE * a.iter().map(|w| w * w).sum::<f64>()
}

/// Dense normal equations by Gaussian elimination with partial pivoting.
fn normal_equations(rows: &[Vec<f64>], y: &[f64], m: usize) -> Vec<f64> {
    let mut a = vec![vec![0.0; m + 1]; m];
    for i in 0..m {
        for j in 0..m {
            a[i][j] = rows.iter().map(|r| r[i] * r[j]).sum::<f64>() + if i == j { RIDGE } else { 0.0 };
        }
        a[i][m] = rows.iter().zip(y).map(|(r, t)| r[i] * t).sum();
    }
    for c in 0..m {
        let piv = (c..m).max_by(|&p, &q| a[p][c].abs().total_cmp(&a[q][c].abs())).unwrap();
        a.swap(c, piv);
        for r in 0..m {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=m {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..m).map(|i| a[i][m] / a[i][i]).collect()
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (w, h) = (rng.gen_range(5..12), rng.gen_range(5..12));
        let mut level_maps = Vec::new();
        let mut gts = Vec::new();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for _ in 0..rng.gen_range(2..5) {
            let gt = BinaryMask::from_fn(w, h, |_, _| rng.gen_bool(0.4)).unwrap();
            let noise = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
            let maps: Vec<SaliencyMap> = noise
                .iter()
                .map(|&nz| {
                    let v = gt.values().iter().map(|&g| ((1.0 - nz) * g as u8 as f64 + nz * rng.gen::<f64>()).min(1.0)).collect();
                    SaliencyMap::new(w, h, v).unwrap()
                })
                .collect();
            for p in 0..w * h {
                rows.push(maps.iter().map(|m| m.values()[p]).collect::<Vec<_>>());
                y.push(gt.values()[p] as u8 as f64);
            }
            level_maps.push(maps);
            gts.push(gt);
        }
        let fit = fit_fusion(&level_maps, &gts).map_err(|e| e.to_string())?;
        let oracle = normal_equations(&rows, &y, 3);
        let want = objective(&rows, &y, &oracle);
        worst = worst.max((fit.residual - want).abs());
        ensure((fit.residual - want).abs() <= 1e-8, || {
            format!("seed {seed}: residual {} vs oracle {want}", fit.residual)
        })?;
        let base = objective(&rows, &y, &fit.alphas);
        for k in 0..3 {
            for d in [1e-3, -1e-3] {
                let mut a = fit.alphas.clone();
                a[k] += d;
                let moved = objective(&rows, &y, &a);
                ensure(moved >= base, || format!("seed {seed}: moving weight {k} by {d} lowered the residual"))?;
            }
        }
    }
    Ok(format!("10 problems, max residual gap {worst:.2e}; all perturbations non-decreasing"))
}

// ---------------------------------------------------------------- 4

struct Point {
    precision: f64,
    recall: f64,
    fpr: f64,
}

fn counting_points(map: &SaliencyMap, gt: &BinaryMask) -> Vec<Point> {
    (0..256)
        .map(|t| {
            let (mut tp, mut fp, mut fneg, mut tn) = (0u32, 0u32, 0u32, 0u32);
            for (&v, &g) in map.values().iter().zip(gt.values()) {
                let level = (v * 255.0).round();
                match (level >= t as f64, g) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => tn += 1,
                }
            }
            let ratio = |a: u32, b: u32, empty: f64| if a + b == 0 { empty } else { a as f64 / (a + b) as f64 };
            Point {
                precision: ratio(tp, fp, 1.0),
                recall: ratio(tp, fneg, 1.0),
                fpr: ratio(fp, tn, 0.0),
            }
        })
        .collect()
}

fn f_beta(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        (1.0 + 0.3) * p * r / (0.3 * p + r)
    }
}

/// Probability a random positive outranks a random negative, ties half.
fn rank_auc(map: &SaliencyMap, gt: &BinaryMask) -> f64 {
    let q: Vec<i64> = map.values().iter().map(|v| (v * 255.0).round() as i64).collect();
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..q.len() {
        for j in 0..q.len() {
            if gt.values()[i] && !gt.values()[j] {
                pairs += 1.0;
                wins += if q[i] > q[j] { 1.0 } else if q[i] == q[j] { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

fn criterion_4() -> Outcome {
    let tol = 1e-12;
    let close = |a: f64, b: f64| (a - b).abs() <= tol;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let gt = loop {
            let g = BinaryMask::from_fn(8, 8, |_, _| rng.gen_bool(0.35)).unwrap();
            if g.count() > 0 && g.count() < 64 {
                break g;
            }
        };
        let v: Vec<f64> = gt
            .values()
            .iter()
            .map(|&g| {
                // Some values sit on 8-bit levels so ties are exercised.
                let raw: f64 = (0.35 * g as u8 as f64 + 0.65 * rng.gen::<f64>()).min(1.0);
                if rng.gen_bool(0.3) { (raw * 255.0).round() / 255.0 } else { raw }
            })
            .collect();
        let map = SaliencyMap::new(8, 8, v).unwrap();
        let curve = image_curve(&map, &gt).map_err(|e| e.to_string())?;
        let oracle = counting_points(&map, &gt);
        ensure(curve.points.len() == 256, || format!("seed {seed}: {} points", curve.points.len()))?;
        for (t, (a, b)) in curve.points.iter().zip(&oracle).enumerate() {
            ensure(
                close(a.precision, b.precision) && close(a.recall, b.recall) && close(a.tpr, b.recall) && close(a.fpr, b.fpr),
                || format!("seed {seed}: threshold {t} differs"),
            )?;
        }
        ensure(close(auc(&curve), rank_auc(&map, &gt)), || {
            format!("seed {seed}: AUC {} vs {}", auc(&curve), rank_auc(&map, &gt))
        })?;
        let best = oracle.iter().map(|p| f_beta(p.precision, p.recall)).fold(0.0, f64::max);
        ensure(close(max_f(&curve, BETA2), best), || format!("seed {seed}: max-F differs"))?;

        let t = (2.0 * map.values().iter().sum::<f64>() / 64.0).min(1.0);
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (&v, &g) in map.values().iter().zip(gt.values()) {
            match (v >= t, g) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        let p = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
        let r = tp / (tp + fneg);
        let prf = adaptive_prf(&map, &gt).map_err(|e| e.to_string())?;
        ensure(close(prf.precision, p) && close(prf.recall, r) && close(prf.f, f_beta(p, r)), || {
            format!("seed {seed}: adaptive PRF differs")
        })?;
        let want_mae = map.values().iter().zip(gt.values()).map(|(v, &g)| (v - g as u8 as f64).abs()).sum::<f64>() / 64.0;
        ensure(close(mae(&map, &gt).unwrap(), want_mae), || format!("seed {seed}: MAE differs"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4999);
    let gts: Vec<BinaryMask> = (0..5).map(|_| BinaryMask::from_fn(8, 8, |x, y| (x + y) % 3 == 0 || rng.gen_bool(0.2)).unwrap()).collect();
    let maps: Vec<SaliencyMap> = gts.iter().map(SaliencyMap::from_mask).collect();
    let e = evaluate(&maps, &gts).map_err(|e| e.to_string())?;
    ensure(e.summary.auc == 1.0 && e.summary.mae == 0.0 && e.summary.max_f == 1.0, || {
        format!("identity: AUC {} MAE {} maxF {}", e.summary.auc, e.summary.mae, e.summary.max_f)
    })?;
    Ok("50 pairs match counting oracles at every threshold; identity gives AUC=1, MAE=0, maxF=1".into())
}

// ---------------------------------------------------------------- 5

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Every descriptor entry evaluated from raw pixels.
fn descriptor_oracle(img: &RasterImage, labels: &[u32], target: u32, init: &[f64]) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let border = |p: usize| {
        let (x, y) = (p % w, p / w);
        x.min(y).min(w - 1 - x).min(h - 1 - y) < BORDER
    };
    let mut bg: Vec<usize> = (0..n).filter(|&p| border(p) && init[p] < BACKGROUND_THRESHOLD).collect();
    if bg.is_empty() {
        bg = (0..n).filter(|&p| border(p)).collect();
    }
    let gray: Vec<f64> = img.pixels().iter().map(|&p| luma_of(p)).collect();
    let bank = FilterBank::standard();
    let half = (bank.support / 2) as isize;
    let responses: Vec<Vec<f64>> = bank
        .filters
        .iter()
        .map(|f| {
            (0..n)
                .map(|p| {
                    let (x, y) = ((p % w) as isize, (p / w) as isize);
                    let mut acc = 0.0;
                    for dy in -half..=half {
                        for dx in -half..=half {
                            let k = ((dy + half) as usize) * bank.support + (dx + half) as usize;
                            acc += f[k] * gray[mirror(y + dy, h) * w + mirror(x + dx, w)];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let lm: Vec<usize> = (0..n)
        .map(|p| {
            let best = responses.iter().map(|r| r[p].abs()).fold(0.0, f64::max);
            responses.iter().position(|r| r[p].abs() >= best - 1e-9).unwrap()
        })
        .collect();
    let lbp: Vec<usize> = (0..n)
        .map(|p| {
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            let at = |dx: isize, dy: isize| {
                gray[((y + dy).clamp(0, h as isize - 1) as usize) * w + (x + dx).clamp(0, w as isize - 1) as usize]
            };
            let ring = [at(-1, -1), at(0, -1), at(1, -1), at(1, 0), at(1, 1), at(0, 1), at(-1, 1), at(-1, 0)];
            (0..8).filter(|&k| ring[k] >= gray[p]).map(|k| 128 >> k).sum()
        })
        .collect();
    let region: Vec<usize> = (0..n).filter(|&p| labels[p] == target).collect();
    let all: Vec<usize> = (0..n).collect();
    let raw = |s: usize, p: usize| -> [f64; 3] {
        let px = img.pixels()[p];
        match s {
            0 => px.map(f64::from),
            1 => lab_of(px),
            _ => hsv_of(px),
        }
    };
    let scale = [255.0, 100.0, 1.0];
    let unit = |s: usize, p: usize| raw(s, p).map(|v| v / scale[s]);
    let mean = |s: usize, set: &[usize], c: usize| set.iter().map(|&p| unit(s, p)[c]).sum::<f64>() / set.len() as f64;
    let ranges = [
        [(0.0, 255.0); 3],
        [(0.0, 100.0), (-128.0, 127.0), (-128.0, 127.0)],
        [(0.0, 1.0); 3],
    ];
    let color_hist = |s: usize, set: &[usize]| {
        let mut c = vec![0.0; 512];
        for &p in set {
            let v = raw(s, p);
            let bin = |ch: usize| {
                let (lo, hi) = ranges[s][ch];
                (((v[ch] - lo) / (hi - lo) * 8.0).floor().max(0.0) as usize).min(7)
            };
            c[bin(0) * 64 + bin(1) * 8 + bin(2)] += 1.0;
        }
        c.iter().map(|v| v / set.len() as f64).collect::<Vec<_>>()
    };
    let code_hist = |codes: &[usize], bins: usize, set: &[usize]| {
        let mut c = vec![0.0; bins];
        for &p in set {
            c[codes[p]] += 1.0;
        }
        c.iter().map(|v| v / set.len() as f64).collect::<Vec<_>>()
    };
    let chi = |a: &[f64], b: &[f64]| {
        0.5 * a.iter().zip(b).map(|(x, y)| if x + y > 0.0 { (x - y).powi(2) / (x + y) } else { 0.0 }).sum::<f64>()
    };
    let mut out = Vec::new();
    for s in 0..3 {
        for other in [&bg, &all] {
            for c in 0..3 {
                out.push((mean(s, &region, c) - mean(s, other, c)).abs());
            }
        }
        out.push(chi(&color_hist(s, &region), &color_hist(s, &bg)));
        out.push(chi(&color_hist(s, &region), &color_hist(s, &all)));
    }
    for (codes, bins) in [(&lm, 48), (&lbp, 256)] {
        out.push(chi(&code_hist(codes, bins, &region), &code_hist(codes, bins, &bg)));
        out.push(chi(&code_hist(codes, bins, &region), &code_hist(codes, bins, &all)));
    }
    for s in 0..3 {
        for c in 0..3 {
            let m = mean(s, &region, c);
            out.push(region.iter().map(|&p| (unit(s, p)[c] - m).powi(2)).sum::<f64>() / region.len() as f64);
        }
    }
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && x < w as isize && y < h as isize && labels[y as usize * w + x as usize] == target;
    let boundary = region
        .iter()
        .filter(|&&p| {
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            !(inside(x - 1, y) && inside(x + 1, y) && inside(x, y - 1) && inside(x, y + 1))
        })
        .count();
    out.push(boundary as f64 / (2 * (w + h)) as f64);
    out.push(region.len() as f64 / n as f64);
    out
}

fn criterion_5() -> Outcome {
    let shapes: [(usize, usize, fn(usize, usize) -> bool); 5] = [
        (6, 6, |x, y| (2..4).contains(&x) && (1..5).contains(&y)),
        (8, 8, |x, y| x + y < 7),
        (7, 5, |x, _| x >= 4),
        (8, 6, |x, y| (x as isize - 4).pow(2) + (y as isize - 3).pow(2) <= 4),
        (5, 8, |x, y| y % 3 == 0 || x == 2),
    ];
    let mut worst: f64 = 0.0;
    for (k, &(w, h, inside)) in shapes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + k as u64);
        let fg: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let bgc: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let jitter = k % 2 == 1;
        let img = RasterImage::from_fn(w, h, |x, y| {
            let base = if inside(x, y) { fg } else { bgc };
            if jitter {
                base.map(|v| v.saturating_add(rng.gen_range(0..20)))
            } else {
                base
            }
        })
        .unwrap();
        let raw: Vec<u32> = (0..w * h).map(|p| inside(p % w, p / w) as u32).collect();
        let seg = Segmentation::from_labels(w, h, &raw).map_err(|e| e.to_string())?;
        // A salient foreground region keeps it out of the pseudo-background.
        let init: Vec<f64> = raw.iter().map(|&l| if l == 1 { 0.8 } else { 0.02 }).collect();
        let init_map = SaliencyMap::new(w, h, init.clone()).unwrap();
        let feat = ImageFeatures::new(&img);
        let reference = feat
            .reference(&pseudo_background(&init_map, BORDER, BACKGROUND_THRESHOLD))
            .map_err(|e| e.to_string())?;
        for r in 0..seg.num_regions() {
            let got = descriptor(&feat, &reference, &seg, r).map_err(|e| e.to_string())?;
            let label = seg.labels()[seg.region(r).pixels[0] as usize];
            let want = descriptor_oracle(&img, seg.labels(), label, &init);
            for (i, (a, b)) in got.as_slice().iter().zip(&want).enumerate() {
                let gap = (a - b).abs();
                worst = worst.max(gap);
                ensure(gap <= 1e-9, || format!("image {k} region {r} entry {i}: {a} vs {b}"))?;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5999);
    for i in 0..1000 {
        let bins = [8, 48, 256, 512][i % 4];
        let draw = |rng: &mut ChaCha8Rng| {
            let counts: Vec<u32> = (0..bins).map(|_| if rng.gen_bool(0.6) { 0 } else { rng.gen_range(0..5) }).collect();
            Histogram::from_counts(&counts)
        };
        let a = draw(&mut rng);
        let b = if i % 10 == 0 { a.clone() } else { draw(&mut rng) };
        let ab = chi_square(&a, &b).unwrap();
        ensure(ab == chi_square(&b, &a).unwrap(), || format!("pair {i}: asymmetric"))?;
        ensure(chi_square(&a, &a).unwrap() == 0.0, || format!("pair {i}: self distance nonzero"))?;
        ensure((ab == 0.0) == (a == b), || format!("pair {i}: zero iff equal violated"))?;
        ensure((0.0..=1.0 + 1e-12).contains(&ab), || format!("pair {i}: {ab} out of range"))?;
    }
    Ok(format!("5 images match within {worst:.1e}; 1000 histogram pairs symmetric, zero iff equal"))
}

// ---------------------------------------------------------------- 6

fn check_partition(seg: &Segmentation) -> Result<(), String> {
    let (w, h) = (seg.width(), seg.height());
    let mut seen = vec![false; w * h];
    for (r, region) in seg.regions().iter().enumerate() {
        if region.pixels.is_empty() {
            return Err(format!("region {r} is empty"));
        }
        for &p in &region.pixels {
            let p = p as usize;
            if seen[p] || seg.labels()[p] as usize != r {
                return Err(format!("pixel {p} is not owned by exactly region {r}"));
            }
            seen[p] = true;
        }
        // Flood fill inside the region must reach all its pixels.
        let members: BTreeSet<usize> = region.pixels.iter().map(|&p| p as usize).collect();
        let mut stack = vec![region.pixels[0] as usize];
        let mut reached = BTreeSet::from([stack[0]]);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            let mut nb = Vec::new();
            if x > 0 { nb.push(p - 1) }
            if x + 1 < w { nb.push(p + 1) }
            if y > 0 { nb.push(p - w) }
            if y + 1 < h { nb.push(p + w) }
            for q in nb {
                if members.contains(&q) && reached.insert(q) {
                    stack.push(q);
                }
            }
        }
        if reached.len() != members.len() {
            return Err(format!("region {r} is not 4-connected"));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err("some pixel has no region".into());
    }
    let mut pairs = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            let a = seg.label(x, y);
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx < w && ny < h && seg.label(nx, ny) != a {
                    let b = seg.label(nx, ny);
                    pairs.insert((a, b));
                    pairs.insert((b, a));
                }
            }
        }
    }
    for r in 0..seg.num_regions() {
        let listed: BTreeSet<usize> = seg.neighbors(r).iter().copied().collect();
        let expected: BTreeSet<usize> = pairs.iter().filter(|(a, _)| *a == r).map(|(_, b)| *b).collect();
        if listed != expected {
            return Err(format!("region {r}: adjacency differs from the label grid"));
        }
        for &s in &listed {
            if !seg.neighbors(s).contains(&r) {
                return Err(format!("adjacency not symmetric between {r} and {s}"));
            }
        }
    }
    Ok(())
}

fn criterion_6() -> Outcome {
    let flat = RasterImage::filled(40, 30, [90, 140, 30]).unwrap();
    let stack = build_stack(&flat, 5, 300, 20).map_err(|e| e.to_string())?;
    ensure(stack.levels.iter().all(|s| s.num_regions() == 1), || "uniform image split".into())?;

    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let (w, h) = (rng.gen_range(16..40), rng.gen_range(16..40));
        let img = RasterImage::from_fn(w, h, |x, y| {
            let base = if (x / 8 + y / 8) % 2 == 0 { 60 } else { 180 };
            [0; 3].map(|_| (base + rng.gen_range(0..40)) as u8)
        })
        .unwrap();
        let stack = build_stack(&img, 3, 40, 5).map_err(|e| e.to_string())?;
        for (l, seg) in stack.levels.iter().enumerate() {
            check_partition(seg).map_err(|e| format!("image {seed} level {}: {e}", l + 1))?;
        }
    }

    // Bisection may stop short on a single image, so the corpus median per
    // level carries the verdict; per-image hits are reported alongside.
    let (levels, finest, coarsest) = (5, 300, 20);
    let corpus = synth_items(50, 6100);
    let mut counts = vec![Vec::new(); levels];
    for item in &corpus {
        let stack = build_stack(&item.image, levels, finest, coarsest).map_err(|e| e.to_string())?;
        for (l, seg) in stack.levels.iter().enumerate() {
            counts[l].push(seg.num_regions());
        }
    }
    let mut hits = 0;
    let mut medians = Vec::new();
    for (l, c) in counts.iter_mut().enumerate() {
        let target = level_target(l + 1, levels, finest, coarsest);
        hits += c.iter().filter(|&&n| (n as f64 - target).abs() <= 0.3 * target).count();
        c.sort_unstable();
        let median = if c.len() % 2 == 1 { c[c.len() / 2] as f64 } else { 0.5 * (c[c.len() / 2 - 1] + c[c.len() / 2]) as f64 };
        medians.push(format!("L{} {median} vs {target:.0}", l + 1));
        ensure((median - target).abs() <= 0.3 * target, || {
            format!("level {} median {median} outside ±30% of {target:.0}", l + 1)
        })?;
    }
    Ok(format!(
        "uniform ok; 20 random images partition cleanly; medians {}; {hits}/{} image levels within ±30%",
        medians.join(", "),
        levels * corpus.len()
    ))
}

// ---------------------------------------------------------------- 7

fn desk_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.levels = 5;
    cfg.backbone.input_side = 32;
    cfg.mlp.epochs = 20;
    cfg.forest.n_trees = 50;
    cfg.forest.max_samples = Some(20_000);
    // 200 training images carved 170/30 into train and validation.
    cfg.split = SplitRatios { train: 17, val: 3, test: 5 };
    cfg.seed = 7;
    cfg
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let cfg = desk_config();
    let (tr, va, te) = split_dataset(synth_items(250, 7), &cfg);
    ensure(tr.len() + va.len() == 200 && te.len() == 50, || {
        format!("split {}/{}/{}", tr.len(), va.len(), te.len())
    })?;
    let (bundle, log) = train(&cfg, &tr, &va, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let trained = start.elapsed().as_secs_f64();

    let gts: Vec<BinaryMask> = te.iter().map(|t| t.gt.clone()).collect();
    let mut maps = [Vec::new(), Vec::new()];
    let mut fused = [Vec::new(), Vec::new()];
    for t in &te {
        let prep = prepare_image(&bundle, &t.image, None, &SegmentCache::default()).map_err(|e| e.to_string())?;
        for (k, kind) in [ModelKind::Mdf, ModelKind::Hdhf].into_iter().enumerate() {
            let out = infer_prepared(&bundle, &t.image, &prep, kind, true).map_err(|e| e.to_string())?;
            fused[k].push(out.fused.clone());
            maps[k].push(out.output().clone());
        }
    }
    let score = |m: &[SaliencyMap]| evaluate(m, &gts).map(|e| e.summary).map_err(|e| e.to_string());
    let (mdf, hdhf) = (score(&maps[0])?, score(&maps[1])?);
    let (mdf_raw, hdhf_raw) = (score(&fused[0])?, score(&fused[1])?);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "MDF maxF {:.4} MAE {:.4}; HDHF maxF {:.4} MAE {:.4} (before CRF: MDF {:.4}/{:.4}, HDHF {:.4}/{:.4}); \
         {} MLP and {} forest regions; train {trained:.0}s, total {secs:.0}s on {} thread(s)",
        mdf.max_f,
        mdf.mae,
        hdhf.max_f,
        hdhf.mae,
        mdf_raw.max_f,
        mdf_raw.mae,
        hdhf_raw.max_f,
        hdhf_raw.mae,
        log.mlp_samples,
        log.forest_samples,
        rayon::current_num_threads()
    );
    for (name, s) in [("MDF", &mdf), ("HDHF", &hdhf)] {
        ensure(s.max_f >= 0.85 && s.mae <= 0.10, || format!("{name} below target: {detail}"))?;
    }
    ensure(hdhf.max_f >= mdf.max_f - 0.02, || format!("HDHF worse than MDF: {detail}"))?;
    // Budget is 15 minutes on four cores; scale by the threads available.
    let budget = 900.0 * 4.0 / rayon::current_num_threads().min(4) as f64;
    ensure(secs <= budget, || format!("over time budget {budget:.0}s: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn blur(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        (0..w * h)
            .map(|p| {
                let (x, y) = ((p % w) as isize, (p / w) as isize);
                (-r..=r)
                    .map(|d| {
                        let (sx, sy) = if horizontal { ((x + d).clamp(0, w as isize - 1), y) } else { (x, (y + d).clamp(0, h as isize - 1)) };
                        k[(d + r) as usize] * src[sy as usize * w + sx as usize]
                    })
                    .sum::<f64>()
                    / norm
            })
            .collect()
    };
    pass(&pass(values, true), false)
}

fn criterion_8() -> Outcome {
    let items = synth_items(50, 8);
    let params = CrfParams::default();
    let (mut before, mut after) = (0.0, 0.0);
    for (i, it) in items.iter().enumerate() {
        let (w, h) = (it.gt.width(), it.gt.height());
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + i as u64);
        let mut v: Vec<f64> = it.gt.values().iter().map(|&g| g as u8 as f64).collect();
        for p in sample(&mut rng, w * h, w * h / 20) {
            v[p] = 1.0 - v[p];
        }
        let corrupted = SaliencyMap::from_clamped(w, h, blur(&v, w, h, 1.5)).unwrap();
        let refined = crf_refine(&it.image, &corrupted, &params).map_err(|e| e.to_string())?;
        before += mae(&corrupted, &it.gt).unwrap();
        after += mae(&refined, &it.gt).unwrap();
    }
    let (before, after) = (before / 50.0, after / 50.0);
    let drop = 1.0 - after / before;
    let detail = format!("mean MAE {before:.4} -> {after:.4} ({:.1}% lower)", 100.0 * drop);
    ensure(drop >= 0.30, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn prefix_mask(n: usize) -> BinaryMask {
    BinaryMask::from_fn(10, 10, |x, y| y * 10 + x < n).unwrap()
}

fn criterion_9() -> Outcome {
    let img = RasterImage::from_fn(10, 10, |x, y| if (x + y) % 4 < 2 { [220, 40, 40] } else { [20, 60, 200] }).unwrap();
    let left = BinaryMask::from_fn(10, 10, |x, _| x < 5).unwrap();
    let right = BinaryMask::from_fn(10, 10, |x, _| x >= 5).unwrap();
    let cases: [(f64, [BinaryMask; 3]); 4] = [
        (0.0, [left.clone(), right.clone(), BinaryMask::filled(10, 10, false).unwrap()]),
        (0.85, [prefix_mask(85), prefix_mask(100), prefix_mask(90)]),
        (0.9, [prefix_mask(90), prefix_mask(100), prefix_mask(95)]),
        (1.0, [prefix_mask(40), prefix_mask(40), prefix_mask(40)]),
    ];
    for (c, masks) in &cases {
        let check = check_annotations(&img, masks).map_err(|e| e.to_string())?;
        ensure((check.consistency.value() - c).abs() < 1e-15, || {
            format!("constructed C={c} measured {}", check.consistency.value())
        })?;
        let want = *c >= CONSISTENCY_THRESHOLD;
        ensure(check.included == want && check.gt.is_some() == want, || {
            format!("C={c}: included={} expected {want}", check.included)
        })?;
    }
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let (w, h) = (rng.gen_range(3..12), rng.gen_range(3..12));
        let masks: Vec<BinaryMask> = (0..3).map(|_| BinaryMask::from_fn(w, h, |_, _| rng.gen_bool(0.5)).unwrap()).collect();
        let got = majority_gt(&masks).map_err(|e| e.to_string())?;
        for p in 0..w * h {
            let votes = masks.iter().filter(|m| m.values()[p]).count();
            ensure(got.values()[p] == (votes >= 2), || format!("triplet {seed}: pixel {p} has {votes} votes"))?;
        }
    }
    Ok("C in {0, 0.85, 0.9, 1.0} classified by C >= 0.9; 20 majority votes match".into())
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let mut cfg = PipelineConfig::default();
    cfg.levels = 3;
    cfg.finest = 80;
    cfg.coarsest = 15;
    cfg.backbone.input_side = 16;
    cfg.mlp.epochs = 3;
    cfg.mlp.hidden = 32;
    cfg.forest.n_trees = 5;
    cfg.seed = 10;
    let items = synth_items(12, 10);
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut runs = Vec::new();
    for dir in &dirs {
        let (tr, va, te) = split_dataset(items.clone(), &cfg);
        let (bundle, _) = train(&cfg, &tr, &va, &TrainOptions::default()).map_err(|e| e.to_string())?;
        bundle.save(dir.path()).map_err(|e| e.to_string())?;
        let maps: Vec<SaliencyMap> = te
            .iter()
            .flat_map(|t| {
                [ModelKind::Mdf, ModelKind::Hdhf]
                    .map(|k| infer(&bundle, &t.image, k, true).map(|o| o.output().clone()))
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        runs.push((bundle, maps, te));
    }
    let files = ["bundle.json", "backbone.bin", "mlp.bin", "forest.bin"];
    for f in files {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    let bits = |m: &[SaliencyMap]| m.iter().flat_map(|x| x.values().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    ensure(bits(&runs[0].1) == bits(&runs[1].1), || "maps differ between runs".into())?;

    let loaded = ModelBundle::load(dirs[0].path()).map_err(|e| e.to_string())?;
    let (bundle, maps, te) = &runs[0];
    ensure(&loaded == bundle, || "loaded bundle differs from the trained one".into())?;
    let reloaded: Vec<SaliencyMap> = te
        .iter()
        .flat_map(|t| [ModelKind::Mdf, ModelKind::Hdhf].map(|k| infer(&loaded, &t.image, k, true).unwrap().output().clone()))
        .collect();
    ensure(bits(&reloaded) == bits(maps), || "round-trip inference differs".into())?;
    Ok(format!("bundles byte-identical ({} files), {} maps bit-identical, round trip exact", files.len(), maps.len()))
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient fidelity", criterion_1),
        (2, "CRF oracle equivalence", criterion_2),
        (3, "fusion optimality", criterion_3),
        (4, "metric oracles", criterion_4),
        (5, "handcrafted descriptor oracle", criterion_5),
        (6, "segmentation sanity", criterion_6),
        (7, "end-to-end desk-scale quality", criterion_7),
        (8, "CRF usefulness", criterion_8),
        (9, "dataset tooling", criterion_9),
        (10, "determinism and persistence", criterion_10),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id} ({name}) [{secs:.1}s]: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}) [{secs:.1}s]: {reason}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
