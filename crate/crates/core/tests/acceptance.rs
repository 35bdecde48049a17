//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Built without the libtest harness so the lines always print.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use congeo::config::ExperimentConfig;
use congeo::data::{generate_synthetic, LocationRecord, SyntheticSpec};
use congeo::encoders::{DualEncoder, EncoderConfig};
use congeo::evaluation::{default_sweep_angles, EvalSet, EvalSetting, Evaluator};
use congeo::image::{AerialImage, Image, PanoramaImage};
use congeo::losses::*;
use congeo::retrieval::*;
use congeo::training::{build_batch, loss_and_gradients, train, AblationFlags, TrainConfig, TrainState};
use congeo::transforms::{aerial_rotate_with_shift, cyclic_shift, fov_crop, QuarterTurn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
    for row in v.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

// ---------------------------------------------------------------- losses

const FD_STEP: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-4;
// below this magnitude the comparison becomes absolute
const FD_FLOOR: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Central differences of `f` at `x` for every coordinate.
fn numeric_grad(x: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn compare(what: &str, analytic: &[f64], numeric: &[f64], worst: &mut f64) -> Result<(), String> {
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(*a, *n);
        *worst = worst.max(e);
        ensure!(e <= FD_REL_TOL, "{what}[{i}]: analytic {a:e} vs numeric {n:e} (rel err {e:e})");
    }
    Ok(())
}

fn scalar_fd(x: f64, f: impl Fn(f64) -> f64) -> f64 {
    let h = FD_STEP * x.abs().max(1.0);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn loss_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut r = rng(2024);
    for batch in 0..20 {
        let n = r.random_range(2..=8);
        let d = r.random_range(2..=16);
        let tau = r.random_range(0.05..1.0);
        let a = unit_rows(&mut r, n, d);
        let c = unit_rows(&mut r, n, d);
        let tag = |s: &str| format!("batch {batch} (N={n}, D={d}) {s}");

        // one-directional InfoNCE, as used by all four pairwise objectives
        let diag = PositiveAssignment::diagonal(n);
        let l = info_nce_raw(&a, &c, d, &diag, tau).map_err(|e| e.to_string())?;
        compare(&tag("d_anchors"), &l.d_anchors, &numeric_grad(&a, &|x| info_nce_raw(x, &c, d, &diag, tau).unwrap().value), &mut worst)?;
        compare(&tag("d_candidates"), &l.d_candidates, &numeric_grad(&c, &|x| info_nce_raw(&a, x, d, &diag, tau).unwrap().value), &mut worst)?;
        let nt = scalar_fd(tau, |t| info_nce_raw(&a, &c, d, &diag, t).unwrap().value);
        compare(&tag("d_tau"), &[l.d_tau], &[nt], &mut worst)?;

        // the named objectives are this same function
        let (ab, cb) = (EmbeddingBatch::new(n, d, a.clone()).unwrap(), EmbeddingBatch::new(n, d, c.clone()).unwrap());
        for named in [
            vanilla_cross_loss(&ab, &cb, tau),
            single_modal_ground_loss(&ab, &cb, tau),
            single_modal_aerial_loss(&ab, &cb, tau),
            cross_modal_loss(&ab, &cb, tau),
        ] {
            ensure!(named.map_err(|e| e.to_string())? == l, "{}", tag("named objective differs from InfoNCE"));
        }

        // several positives per anchor
        let multi = PositiveAssignment::Multi(
            (0..n).map(|i| if i % 2 == 0 { vec![i] } else { vec![i, (i + 1) % n] }).collect(),
        );
        let m = info_nce_raw(&a, &c, d, &multi, tau).map_err(|e| e.to_string())?;
        compare(&tag("multi d_anchors"), &m.d_anchors, &numeric_grad(&a, &|x| info_nce_raw(x, &c, d, &multi, tau).unwrap().value), &mut worst)?;
        compare(&tag("multi d_candidates"), &m.d_candidates, &numeric_grad(&c, &|x| info_nce_raw(&a, x, d, &multi, tau).unwrap().value), &mut worst)?;
        compare(&tag("multi d_tau"), &[m.d_tau], &[scalar_fd(tau, |t| info_nce_raw(&a, &c, d, &multi, t).unwrap().value)], &mut worst)?;

        // two-directional variant
        let sym_value = |x: &[f64], y: &[f64], t: f64| {
            0.5 * (info_nce_raw(x, y, d, &diag, t).unwrap().value + info_nce_raw(y, x, d, &diag, t).unwrap().value)
        };
        let s = symmetric_info_nce(&ab, &cb, tau).map_err(|e| e.to_string())?;
        compare(&tag("symmetric d_anchors"), &s.d_anchors, &numeric_grad(&a, &|x| sym_value(x, &c, tau)), &mut worst)?;
        compare(&tag("symmetric d_candidates"), &s.d_candidates, &numeric_grad(&c, &|x| sym_value(&a, x, tau)), &mut worst)?;
        compare(&tag("symmetric d_tau"), &[s.d_tau], &[scalar_fd(tau, |t| sym_value(&a, &c, t))], &mut worst)?;

        // soft-margin triplet alternative
        let t = soft_triplet_raw(&a, &c, d).map_err(|e| e.to_string())?;
        compare(&tag("triplet d_q"), &t.d_queries, &numeric_grad(&a, &|x| soft_triplet_raw(x, &c, d).unwrap().value), &mut worst)?;
        compare(&tag("triplet d_r"), &t.d_references, &numeric_grad(&c, &|x| soft_triplet_raw(&a, x, d).unwrap().value), &mut worst)?;
    }

    // learned temperatures of the full weighted objective
    let spec = SyntheticSpec { n_locations: 40, n_test: 8, pano_size: [8, 32], aerial_size: 16, ..Default::default() };
    let records = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let enc = EncoderConfig { ground_size: [8, 32], aerial_size: 16, embed_dim: 16, ..Default::default() };
    let loss = LossConfig::default();
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(enc, &loss, 5).map_err(|e| e.to_string())?;
    for batch in 0..20 {
        let n = r.random_range(2..=8);
        let start = r.random_range(0..records.len() - n);
        let recs: Vec<&LocationRecord> = records[start..start + n].iter().collect();
        for t in state.log_tau.iter_mut() {
            *t = r.random_range(0.05f64..1.0).ln();
        }
        let b = build_batch(&recs, &cfg, false, &mut r).map_err(|e| e.to_string())?;
        let (_, _, _, d_log_tau) = loss_and_gradients(&state, &b, &loss, &cfg.ablation).map_err(|e| e.to_string())?;
        for (i, &analytic) in d_log_tau.iter().enumerate() {
            let num = scalar_fd(state.log_tau[i], |v| {
                let mut s = state.clone();
                s.log_tau[i] = v;
                loss_and_gradients(&s, &b, &loss, &cfg.ablation).unwrap().1
            });
            compare(&format!("total objective batch {batch} d_log_tau"), &[analytic], &[num], &mut worst)?;
        }
    }

    // uniform logits
    let mut worst_uniform = 0.0f64;
    for n in 1..=64usize {
        let d = 8;
        let one = unit_rows(&mut r, 1, d);
        let rows: Vec<f64> = one.iter().cycle().take(n * d).copied().collect();
        let v = info_nce_raw(&rows, &rows, d, &PositiveAssignment::diagonal(n), 0.07).map_err(|e| e.to_string())?.value;
        worst_uniform = worst_uniform.max((v - (n as f64).ln()).abs());
    }
    ensure!(worst_uniform <= 1e-6, "uniform-logit InfoNCE deviates from ln N by {worst_uniform:e}");

    // zero weights leave only the plain term
    let zero = LossConfig { w1: 0.0, w2: 0.0, w3: 0.0, ..LossConfig::default() };
    for _ in 0..100 {
        let c = LossComponents {
            vanilla: r.random_range(0.0..10.0),
            single_q: r.random_range(0.0..10.0),
            single_r: r.random_range(0.0..10.0),
            cross: r.random_range(0.0..10.0),
        };
        ensure!(total_loss(&c, &zero) == c.vanilla, "total with w=0 is {} but vanilla is {}", total_loss(&c, &zero), c.vanilla);
    }
    let recs: Vec<&LocationRecord> = records[..6].iter().collect();
    let b = build_batch(&recs, &cfg, false, &mut r).map_err(|e| e.to_string())?;
    let (parts, total, grads, _) = loss_and_gradients(&state, &b, &zero, &AblationFlags::full()).map_err(|e| e.to_string())?;
    ensure!(total == parts.vanilla, "training objective with w=0 is {total}, vanilla {}", parts.vanilla);
    let (_, vtotal, vgrads, _) = loss_and_gradients(&state, &b, &zero, &AblationFlags::vanilla()).map_err(|e| e.to_string())?;
    ensure!(vtotal == total && vgrads == grads, "w=0 objective differs from the vanilla-only objective");

    Ok(format!("worst gradient rel err {worst:.1e}, worst |InfoNCE - ln N| {worst_uniform:.1e}"))
}

// ------------------------------------------------------------ transforms

fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
    Image::from_vec(h, w, c, (0..h * w * c).map(|_| r.random::<f32>()).collect()).unwrap()
}

fn transform_algebra() -> Outcome {
    let mut r = rng(7);
    let mut checks = 0usize;
    for _ in 0..50 {
        let w = r.random_range(1..=96usize);
        let h = r.random_range(1..=6usize);
        let pano = PanoramaImage::new(random_image(&mut r, h, w, 3));
        let step = 360.0 / w as f64;

        ensure!(cyclic_shift(&pano, 0.0) == pano, "shift by 0 changed a width-{w} panorama");
        ensure!(cyclic_shift(&pano, 360.0) == pano, "shift by 360 changed a width-{w} panorama");

        let (i, j) = (r.random_range(0..3 * w), r.random_range(0..3 * w));
        let (a, b) = (i as f64 * step, j as f64 * step);
        let shifted = cyclic_shift(&pano, a);
        // column c of the output is column (c + k) mod W of the input
        let k = i % w;
        for row in 0..h {
            for col in 0..w {
                ensure!(
                    shifted.image.pixel(row, col) == pano.image.pixel(row, (col + k) % w),
                    "shift by {a} deg: column {col} is not input column {}",
                    (col + k) % w
                );
            }
        }
        ensure!(cyclic_shift(&shifted, b) == cyclic_shift(&pano, (i + j) as f64 * step), "composition failed (W={w})");
        ensure!(cyclic_shift(&shifted, -a) == pano, "shift by -theta does not invert (W={w})");
        let theta = r.random_range(0.0..360.0);
        ensure!(cyclic_shift(&pano, theta + 360.0) == cyclic_shift(&pano, theta), "wrap failed at {theta} (W={w})");
        ensure!(cyclic_shift(&pano, theta - 720.0) == cyclic_shift(&pano, theta), "negative wrap failed at {theta} (W={w})");
        checks += 7;
    }

    for _ in 0..50 {
        let w = r.random_range(8..=1024usize);
        let alpha: f64 = r.random_range(1.0..=360.0);
        let expected = (w as f64 * alpha / 360.0).round() as usize;
        let pano = PanoramaImage::new(random_image(&mut r, 2, w, 3));
        if expected == 0 {
            ensure!(fov_crop(&pano, alpha, false).is_err(), "empty crop accepted (W={w}, alpha={alpha})");
            continue;
        }
        let crop = fov_crop(&pano, alpha, false).map_err(|e| e.to_string())?;
        ensure!(crop.width() == expected, "crop of W={w}, alpha={alpha} has width {}, expected {expected}", crop.width());
        let padded = fov_crop(&pano, alpha, true).map_err(|e| e.to_string())?;
        ensure!(padded.width() == w, "padded crop of W={w} has width {}", padded.width());
        checks += 2;
    }

    for _ in 0..20 {
        let s = r.random_range(1..=24usize);
        let w = 4 * r.random_range(1..=32usize);
        let aerial = AerialImage::new(random_image(&mut r, s, s, 3)).unwrap();
        let pano = PanoramaImage::new(random_image(&mut r, 3, w, 3));
        for q in [QuarterTurn::Deg90, QuarterTurn::Deg180, QuarterTurn::Deg270] {
            let (mut a, mut p) = (aerial.clone(), pano.clone());
            for _ in 0..4 {
                (a, p) = aerial_rotate_with_shift(&a, &p, q);
            }
            ensure!(a == aerial && p == pano, "four {}-degree applications did not restore the inputs", q.degrees());
            checks += 1;
        }
        // one counter-clockwise quarter turn: out[r][c] = in[c][S-1-r]
        let (a, _) = aerial_rotate_with_shift(&aerial, &pano, QuarterTurn::Deg90);
        for row in 0..s {
            for col in 0..s {
                ensure!(a.image().pixel(row, col) == aerial.image().pixel(col, s - 1 - row), "rotation direction wrong at ({row},{col})");
            }
        }
    }
    Ok(format!("{checks} exact checks"))
}

// --------------------------------------------------------------- metrics

struct Instance {
    gallery: Gallery,
    ids: Vec<String>,
    sims: Vec<Vec<f64>>,
    positives: Vec<Vec<usize>>,
    results: Vec<RankedResult>,
}

fn random_instance(r: &mut ChaCha8Rng) -> Instance {
    let n = r.random_range(1..=50usize);
    let d = r.random_range(2..=6usize);
    // coarse values make exact similarity ties common
    let mut rows = unit_rows(r, n, d);
    for i in 1..n {
        if r.random_bool(0.2) {
            let src = r.random_range(0..i);
            let copy: Vec<f64> = rows[src * d..(src + 1) * d].to_vec();
            rows[i * d..(i + 1) * d].copy_from_slice(&copy);
        }
    }
    let mut ids: Vec<String> = (0..n).map(|i| format!("g{:03}", (i * 37 + 11) % 1000)).collect();
    ids.shuffle(r);
    let gallery = Gallery::new(ids.clone(), EmbeddingBatch::new(n, d, rows.clone()).unwrap()).unwrap();
    let n_q = r.random_range(1..=10usize);
    let mut sims = Vec::new();
    let mut positives = Vec::new();
    let mut query_rows = Vec::new();
    for _ in 0..n_q {
        let q = if r.random_bool(0.3) {
            let src = r.random_range(0..n);
            rows[src * d..(src + 1) * d].to_vec()
        } else {
            unit_rows(r, 1, d)
        };
        sims.push((0..n).map(|j| q.iter().zip(&rows[j * d..(j + 1) * d]).map(|(x, y)| x * y).sum()).collect());
        let mut pos: Vec<usize> = (0..r.random_range(1..=n.min(4))).map(|_| r.random_range(0..n)).collect();
        pos.sort_unstable();
        pos.dedup();
        positives.push(pos);
        query_rows.extend(q);
    }
    let qids: Vec<String> = (0..n_q).map(|i| format!("q{i}")).collect();
    let queries = EmbeddingBatch::new(n_q, d, query_rows).unwrap();
    let results = rank_queries(&qids, &queries, &gallery, &positives).unwrap();
    Instance { gallery, ids, sims, positives, results }
}

/// 0-based rank of gallery row `j`: rows strictly more similar, or equally
/// similar with a smaller id, come first.
fn oracle_rank(sims: &[f64], ids: &[String], j: usize) -> usize {
    (0..sims.len()).filter(|&k| sims[k] > sims[j] || (sims[k] == sims[j] && ids[k] < ids[j])).count()
}

fn metric_oracles() -> Outcome {
    let mut r = rng(99);
    let mut queries = 0usize;
    for inst_no in 0..200 {
        let inst = random_instance(&mut r);
        let n = inst.gallery.len();
        let mut all_ranks: Vec<Vec<usize>> = Vec::new();
        for (qi, res) in inst.results.iter().enumerate() {
            let ranks: Vec<usize> = (0..n).map(|j| oracle_rank(&inst.sims[qi], &inst.ids, j)).collect();
            for (j, &rk) in ranks.iter().enumerate() {
                ensure!(res.order[rk] == j, "instance {inst_no} query {qi}: row {j} should be at rank {rk}");
            }
            let mut pr: Vec<usize> = inst.positives[qi].iter().map(|&p| ranks[p]).collect();
            pr.sort_unstable();
            ensure!(res.positive_ranks == pr, "instance {inst_no} query {qi}: positive ranks {:?} vs {pr:?}", res.positive_ranks);
            all_ranks.push(pr);
            queries += 1;
        }
        let n_q = all_ranks.len() as f64;
        for k in [1usize, 2, 5, 10, 50, 100] {
            let hits = all_ranks.iter().filter(|pr| pr.iter().any(|&p| p < k)).count();
            let got = recall_at_k(&inst.results, k).map_err(|e| e.to_string())?;
            ensure!(got == hits as f64 / n_q, "instance {inst_no}: R@{k} {got} vs {}", hits as f64 / n_q);
        }
        let mut window = 1;
        while window * 100 < n {
            window += 1;
        }
        let hits = all_ranks.iter().filter(|pr| pr.iter().any(|&p| p < window)).count();
        let got = recall_at_1pct(&inst.results).map_err(|e| e.to_string())?;
        ensure!(got == hits as f64 / n_q, "instance {inst_no}: R@1% {got}");

        let mut ap_sum = 0.0;
        for pr in &all_ranks {
            let mut found = 0usize;
            let mut precision_sum = 0.0;
            for pos in 0..n {
                if pr.contains(&pos) {
                    found += 1;
                    precision_sum += found as f64 / (pos + 1) as f64;
                }
            }
            ap_sum += precision_sum / pr.len() as f64;
        }
        let got = average_precision(&inst.results).map_err(|e| e.to_string())?;
        ensure!(got == ap_sum / n_q, "instance {inst_no}: AP {got} vs {}", ap_sum / n_q);

        let (bw, nb) = (r.random_range(1..=10usize), r.random_range(1..=8usize));
        let mut hist = vec![0usize; nb];
        for pr in &all_ranks {
            let rank = pr[0];
            let bin = (0..nb).find(|&b| rank >= b * bw && rank < (b + 1) * bw).unwrap_or(nb - 1);
            hist[bin] += 1;
        }
        let got = rank_distribution(&inst.results, bw, nb).map_err(|e| e.to_string())?;
        ensure!(got == hist, "instance {inst_no}: histogram {got:?} vs {hist:?}");
    }
    Ok(format!("200 instances, {queries} queries"))
}

// ---------------------------------------------------------- experiments

struct Trained {
    vanilla: DualEncoder,
    congeo: DualEncoder,
    records: Vec<LocationRecord>,
    train_time: Duration,
}

fn train_pair() -> Result<Trained, String> {
    let cfg = ExperimentConfig::default();
    let records = cfg.dataset.load().map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let vanilla = train(&records, &cfg.encoder, &cfg.loss, &TrainConfig::vanilla()).map_err(|e| e.to_string())?;
    let congeo = train(&records, &cfg.encoder, &cfg.loss, &cfg.train).map_err(|e| e.to_string())?;
    Ok(Trained { vanilla: vanilla.encoder, congeo: congeo.encoder, records, train_time: t0.elapsed() })
}

fn shortcut_collapse(t: &Trained) -> Outcome {
    let set = EvalSet::from_records(&t.records).map_err(|e| e.to_string())?;
    let n_train = t.records.len() - set.query_ids.len();
    ensure!((n_train, set.query_ids.len()) == (512, 128), "dataset is {n_train}/{} locations", set.query_ids.len());
    let r1 = |enc: &DualEncoder, s: &EvalSetting| -> Result<f64, String> {
        Ok(Evaluator::new(enc, &set).and_then(|ev| ev.run(s)).map_err(|e| e.to_string())?.r1())
    };
    let north = EvalSetting::north_aligned();
    let unknown = EvalSetting::unknown_orientation(0);
    let (vn, vu) = (r1(&t.vanilla, &north)?, r1(&t.vanilla, &unknown)?);
    let (cn, cu) = (r1(&t.congeo, &north)?, r1(&t.congeo, &unknown)?);
    let detail = format!(
        "vanilla north {vn:.3} unknown {vu:.3}; congeo north {cn:.3} unknown {cu:.3}; training {:.0} s",
        t.train_time.as_secs_f64()
    );
    ensure!(vn >= 0.90, "vanilla north R@1 {vn:.3} < 0.90 ({detail})");
    ensure!(vu <= 0.40, "vanilla unknown R@1 {vu:.3} > 0.40 ({detail})");
    ensure!(cu >= vu + 0.20, "congeo unknown R@1 {cu:.3} < vanilla {vu:.3} + 0.20 ({detail})");
    ensure!(cn >= 0.80, "congeo north R@1 {cn:.3} < 0.80 ({detail})");
    ensure!(t.train_time <= Duration::from_secs(600), "training took {:.0} s", t.train_time.as_secs_f64());
    Ok(detail)
}

fn sweep_gap(t: &Trained) -> Outcome {
    let set = EvalSet::from_records(&t.records).map_err(|e| e.to_string())?;
    let angles = default_sweep_angles();
    ensure!(angles.len() == 16 && angles[0] == 0.0, "sweep angles {angles:?}");
    let mut gaps = Vec::new();
    for (name, enc) in [("vanilla", &t.vanilla), ("congeo", &t.congeo)] {
        let ev = Evaluator::new(enc, &set).map_err(|e| e.to_string())?;
        let sweep = ev.sweep(&angles).map_err(|e| e.to_string())?;
        let north = ev.run(&EvalSetting::north_aligned()).map_err(|e| e.to_string())?.r1();
        ensure!(sweep.recall_curve[0] == north, "{name}: sweep at 0 deg {} != north R@1 {north}", sweep.recall_curve[0]);
        gaps.push(sweep.invariance_gap);
    }
    ensure!(gaps[1] < gaps[0], "congeo gap {:.3} not below vanilla gap {:.3}", gaps[1], gaps[0]);
    Ok(format!("invariance gap vanilla {:.3}, congeo {:.3}", gaps[0], gaps[1]))
}

fn ablation_trend(t: &Trained) -> Outcome {
    let set = EvalSet::from_records(&t.records).map_err(|e| e.to_string())?;
    let fov90 = EvalSetting::limited_fov(90.0, 0);
    let r1 = |enc: &DualEncoder| -> Result<f64, String> {
        Ok(Evaluator::new(enc, &set).and_then(|ev| ev.run(&fov90)).map_err(|e| e.to_string())?.r1())
    };
    let (v, c) = (r1(&t.vanilla)?, r1(&t.congeo)?);
    ensure!(c >= v + 0.10, "full-loss FoV90 R@1 {c:.3} < vanilla-only {v:.3} + 0.10");
    Ok(format!("FoV90 R@1 vanilla-only {v:.3}, full loss {c:.3}"))
}

const SMALL_CONFIG: &str = r#"
sweep_angles = [0, 90, 180, 270]

[dataset.synthetic]
n_locations = 48
n_test = 16
pano_size = [16, 64]
aerial_size = 32

[encoder]
ground_size = [16, 64]
aerial_size = 32
embed_dim = 16

[train]
epochs = 2
batch_size = 8
train_alpha = "random"
seed = 11
"#;

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL_CONFIG).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let args = ["congeo", "train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        let code = congeo::cli::run(args);
        ensure!(code == 0, "run {run} exited with {code}");
        let metrics = fs::read(out.join("metrics.json")).map_err(|e| e.to_string())?;
        let checkpoint = fs::read(out.join("checkpoint.safetensors")).map_err(|e| e.to_string())?;
        outputs.push((metrics, checkpoint));
    }
    ensure!(outputs[0].0 == outputs[1].0, "metrics.json differs between identical runs");
    ensure!(outputs[0].1 == outputs[1].1, "final checkpoints differ between identical runs");
    Ok(format!("metrics.json ({} bytes) and checkpoint identical", outputs[0].0.len()))
}

fn chance_level() -> Outcome {
    let cfg = ExperimentConfig::default();
    let records = cfg.dataset.load().map_err(|e| e.to_string())?;
    let set = EvalSet::from_records(&records).map_err(|e| e.to_string())?;
    let untrained = TrainState::new(cfg.encoder.clone(), &cfg.loss, 0).map_err(|e| e.to_string())?;
    let ev = Evaluator::new(&untrained.encoder, &set).map_err(|e| e.to_string())?;
    let n = set.query_ids.len() as f64;
    let p = 1.0 / ev.gallery().len() as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    let mut parts = Vec::new();
    for s in &cfg.eval {
        let r1 = ev.run(s).map_err(|e| e.to_string())?.r1();
        ensure!((r1 - p).abs() <= 3.0 * sigma, "{}: R@1 {r1:.4} outside {p:.4} +/- {:.4}", s.label(), 3.0 * sigma);
        parts.push(format!("{} {r1:.4}", s.label()));
    }
    Ok(format!("{} (chance {p:.4} +/- {:.4})", parts.join(", "), 3.0 * sigma))
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t0 = Instant::now();
    let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let dt = t0.elapsed();
    match (out, limit) {
        (Ok(_), Some(l)) if dt > l => (Err(format!("took {:.1} s, limit {:.0} s", dt.as_secs_f64(), l.as_secs_f64())), dt),
        (o, _) => (o, dt),
    }
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut record = |name, (o, d)| results.push((name, o, d));

    record("loss correctness", timed(secs(30), loss_correctness));
    record("transformation algebra", timed(secs(10), transform_algebra));
    record("metric oracles", timed(secs(30), metric_oracles));
    let t0 = Instant::now();
    match train_pair() {
        Ok(t) => {
            record("shortcut collapse", timed(None, || shortcut_collapse(&t)));
            record("orientation sweep", timed(None, || sweep_gap(&t)));
            record("ablation trend", timed(None, || ablation_trend(&t)));
        }
        Err(e) => {
            for name in ["shortcut collapse", "orientation sweep", "ablation trend"] {
                record(name, (Err(format!("training failed: {e}")), t0.elapsed()));
            }
        }
    }
    record("determinism", timed(None, determinism));
    record("chance level", timed(None, chance_level));

    let mut failed = 0;
    for (name, outcome, dt) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name:<24} {:>7.1} s  {detail}", dt.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<24} {:>7.1} s  {why}", dt.as_secs_f64());
            }
        }
    }
    println!("{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
