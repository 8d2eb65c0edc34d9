//! The nine primary acceptance criteria, run in order by one test. Each
//! criterion prints a single `PASS` or `FAIL` line to stderr (bypassing
//! the test harness's output capture) and the test fails if any did.

use std::fs;
use std::io::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::RngCore;
use scanet_core::data::{
    decode_study, encode_study, generate_synthetic_cohort, load_study, permute_labels, save_study, study_file_size,
    synth_study, GeneratorConfig, PatientStudy,
};
use scanet_core::evaluation::roc_auc;
use scanet_core::model::{aggregate, stack_studies, Branch, ModelConfig, MultiHeadAttention, ParamSet, ScaNet, Variant};
use scanet_core::tensor::{load_checkpoint, Tensor};
use scanet_core::training::{cross_entropy_loss, cross_validate, train, CrossValidation, TrainConfig};
use scanet_core::verification::{gradient_suite, DEFAULT_EPS, DEFAULT_TOLERANCE};

/// Seed of the 128-study cohort used by the learning and null checks.
const COHORT_SEED: u64 = 2026;
const CV_FOLDS: usize = 5;

type Outcome = Result<String, String>;

fn report(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn minutes(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn criterion_1_gradients() -> Outcome {
    let start = Instant::now();
    let rows = gradient_suite(DEFAULT_EPS, DEFAULT_TOLERANCE, 0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = rows.iter().map(|r| r.kink_aware_max_relative_error).fold(0.0, f64::max);
    let e2e = rows.last().expect("suite has rows");
    ensure(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, failed {:?}, worst kink-aware rel err {:.2e}; end-to-end tiny model raw {:.2e}, \
             kink-aware {:.2e}, {} of {} elements crossed a ReLU kink, {} unresolved; {}",
            rows.len(),
            failed,
            worst,
            e2e.max_relative_error,
            e2e.kink_aware_max_relative_error,
            e2e.kinks_crossed,
            e2e.elements,
            e2e.unresolved_kinks,
            minutes(elapsed)
        ),
    )
}

fn random_f32(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-3.0f32..3.0)).collect()
}

fn criterion_2_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..50 {
        let (m, k, n) = (rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..12));
        let a = random_f32(m * k, &mut rng);
        let b = random_f32(k * n, &mut rng);
        let got = Tensor::new(a.clone(), &[m, k]).unwrap().matmul(&Tensor::new(b.clone(), &[k, n]).unwrap()).unwrap();
        let want: Vec<f32> = (0..m * n)
            .map(|idx| (0..k).map(|p| a[idx / n * k + p] as f64 * b[p * n + idx % n] as f64).sum::<f64>() as f32)
            .collect();
        mismatches += usize::from(got.to_vec() != want);
    }
    for _ in 0..30 {
        let (bt, c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(3..10), rng.random_range(3..10));
        let (f, kk, s, p) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3), rng.random_range(0..2));
        let x = random_f32(bt * c * h * w, &mut rng);
        let kern = random_f32(f * c * kk * kk, &mut rng);
        let bias = random_f32(f, &mut rng);
        let got = Tensor::new(x.clone(), &[bt, c, h, w])
            .unwrap()
            .conv2d(&Tensor::new(kern.clone(), &[f, c, kk, kk]).unwrap(), Some(&Tensor::new(bias.clone(), &[f]).unwrap()), s, p)
            .unwrap();
        let (oh, ow) = ((h + 2 * p - kk) / s + 1, (w + 2 * p - kk) / s + 1);
        let mut want = Vec::new();
        for b0 in 0..bt {
            for f0 in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[f0] as f64;
                        for c0 in 0..c {
                            for ky in 0..kk {
                                for kx in 0..kk {
                                    let (iy, ix) = ((oy * s + ky) as isize - p as isize, (ox * s + kx) as isize - p as isize);
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[((b0 * c + c0) * h + iy as usize) * w + ix as usize] as f64
                                            * kern[((f0 * c + c0) * kk + ky) * kk + kx] as f64;
                                    }
                                }
                            }
                        }
                        want.push(acc as f32);
                    }
                }
            }
        }
        mismatches += usize::from(got.to_vec() != want);
    }
    let mut auc_mismatches = 0;
    for _ in 0..200 {
        let (scores, labels) = loop {
            let n = rng.random_range(2..=50);
            let pool: Vec<f64> = (0..rng.random_range(1..=6)).map(|_| rng.random::<f64>()).collect();
            let s: Vec<f64> = (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect();
            let l: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            if l.contains(&0) && l.contains(&1) {
                break (s, l);
            }
        };
        let (mut twice, mut pairs) = (0u64, 0u64);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    twice += if scores[i] > scores[j] { 2 } else if scores[i] == scores[j] { 1 } else { 0 };
                }
            }
        }
        auc_mismatches += usize::from(roc_auc(&scores, &labels).unwrap() != twice as f64 / (2 * pairs) as f64);
    }
    ensure(
        mismatches == 0 && auc_mismatches == 0,
        format!(
            "50 matmul + 30 conv2d cases vs 64-bit loops: {mismatches} mismatches; \
             200 tied AUC instances vs pairwise counting: {auc_mismatches} mismatches"
        ),
    )
}

fn criterion_3_architecture() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // attention rows: a standalone block and every SAT/CAT row of the toy model
    let mut ps = ParamSet::new();
    let mha = MultiHeadAttention::new(&mut ps, "a", 12, 3, &mut rng).unwrap();
    let (_, maps) = mha.forward(&Tensor::randn(&[3, 7, 12], 4.0, &mut rng)).unwrap();
    let mut row_err = maps.to_vec().chunks(7).map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let cfg = ModelConfig::toy();
    let net = ScaNet::new(&cfg, 3).unwrap();
    let g = GeneratorConfig::toy();
    let studies: Vec<PatientStudy> = (0..2).map(|i| synth_study(i, 3, &g).unwrap()).collect();
    let refs: Vec<&PatientStudy> = studies.iter().collect();
    let (_, records) = net.predict(&refs, true).unwrap();
    for r in &records {
        row_err = row_err.max(r.max_row_error().map_err(|e| e.to_string())?);
    }

    // aggregate with identical branch logits
    let mut agg_err = 0.0f64;
    for _ in 0..100 {
        let b = rng.random_range(1..8);
        let z = [rng.random_range(-6.0f32..6.0), rng.random_range(-6.0f32..6.0)];
        let logits: Vec<f32> = (0..b).flat_map(|_| z).collect();
        let w = random_f32(b, &mut rng);
        let p = aggregate(&Tensor::new(logits, &[1, b, 2]).unwrap(), &Tensor::new(w, &[b]).unwrap()).unwrap().to_vec();
        let p1 = 1.0 / (1.0 + (z[0] as f64 - z[1] as f64).exp());
        agg_err = agg_err.max((p[1] as f64 - p1).abs()).max((p[0] as f64 - (1.0 - p1)).abs());
    }

    // shared branch against per-neighborhood clones
    let tiny = ModelConfig::tiny();
    let tnet = ScaNet::new(&tiny, 4).unwrap();
    let tg = GeneratorConfig::with_shape(tiny.num_slices, tiny.slice_height, tiny.slice_width);
    let ts: Vec<PatientStudy> = (0..2).map(|i| synth_study(i, 4, &tg).unwrap()).collect();
    let x = stack_studies(&ts.iter().collect::<Vec<_>>()).unwrap();
    let labels = [0u8, 1];
    tnet.params().zero_grad();
    cross_entropy_loss(&tnet.forward(&x, None, false).unwrap().probabilities, &labels).unwrap().backward().unwrap();
    let names: Vec<String> =
        tnet.params().entries().iter().map(|(n, _)| n.clone()).filter(|n| n.starts_with("branch.")).collect();
    let shared: Vec<Vec<f32>> = names.iter().map(|n| tnet.params().get(n).unwrap().grad().unwrap()).collect();
    let (nb, k) = (tiny.num_branches(), tiny.neighborhood_size);
    let clones: Vec<(ParamSet, Branch)> = (0..nb)
        .map(|_| {
            let mut ps = ParamSet::new();
            let br = Branch::new(
                &mut ps,
                "branch",
                tiny.embed_dim,
                &tiny.branch_blocks,
                &tiny.branch_widths,
                tiny.norm_groups,
                &mut ChaCha8Rng::seed_from_u64(0),
            );
            for (n, t) in ps.entries() {
                t.assign(&tnet.params().get(n).unwrap().to_vec()).unwrap();
            }
            (ps, br)
        })
        .collect();
    tnet.params().zero_grad();
    let grids = tnet.partition_tokens(&tnet.sat_forward(&tnet.global_conv_block(&x).unwrap(), None).unwrap().0).unwrap();
    let rows = grids.shape()[0];
    let per = rows / (nb * k);
    let (mut parts, mut order) = (Vec::new(), Vec::new());
    for (gi, (_, br)) in clones.iter().enumerate() {
        let idx: Vec<usize> = (0..per).flat_map(|s| (0..k).map(move |j| (s * nb + gi) * k + j)).collect();
        parts.push(br.forward(&grids.index_select(&idx).unwrap()).unwrap());
        order.extend(idx);
    }
    let mut inverse = vec![0; rows];
    for (pos, &r) in order.iter().enumerate() {
        inverse[r] = pos;
    }
    let emb = Tensor::concat(&parts).unwrap().index_select(&inverse).unwrap();
    cross_entropy_loss(&tnet.fuse_branches(&emb).unwrap().0, &labels).unwrap().backward().unwrap();
    let mut clone_err = 0.0f32;
    for (n, s) in names.iter().zip(&shared) {
        for (i, sv) in s.iter().enumerate() {
            let sum: f32 = clones.iter().map(|(ps, _)| ps.get(n).unwrap().grad().unwrap()[i]).sum();
            clone_err = clone_err.max((sv - sum).abs());
        }
    }

    // slice permutation
    let xs = stack_studies(&refs).unwrap();
    let m = xs.shape()[0];
    let mut perm: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let f = net.global_conv_block(&xs).unwrap();
    let fp = net.global_conv_block(&xs.index_select(&perm).unwrap()).unwrap();
    let t = net.sat_forward(&f, None).unwrap().0;
    let tp = net.sat_forward(&fp, None).unwrap().0;
    let equivariant = fp.to_vec() == f.index_select(&perm).unwrap().to_vec()
        && tp.to_vec() == t.index_select(&perm).unwrap().to_vec();

    ensure(
        row_err <= 1e-5 && agg_err <= 1e-6 && clone_err <= 1e-5 && equivariant,
        format!(
            "attention row error {row_err:.1e}; identical-logit aggregate error {agg_err:.1e}; \
             shared vs clone-sum gradient {clone_err:.1e}; slice-permutation equivariance {}",
            if equivariant { "exact" } else { "violated" }
        ),
    )
}

fn criterion_4_overfit() -> Outcome {
    let g = GeneratorConfig::toy();
    let studies: Vec<PatientStudy> = (0..16).map(|i| synth_study(i, 4, &g).unwrap()).collect();
    let refs: Vec<&PatientStudy> = studies.iter().collect();
    let net = ScaNet::new(&ModelConfig::toy(), 4).unwrap();
    // paper-scale training settings with batch 8, monitoring the training set itself
    let cfg = TrainConfig {
        batch_size: 8,
        validation_fraction: None,
        target_auc: Some(0.99),
        ..TrainConfig::paper_scale()
    };
    let start = Instant::now();
    let out = train(&net, &refs, &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let best = out.history.epochs.iter().filter_map(|e| e.val_auc).fold(0.0, f64::max);
    let reached = out.history.epochs.iter().position(|e| e.val_auc.is_some_and(|a| a >= 0.99));
    ensure(
        reached.is_some() && elapsed < Duration::from_secs(600),
        format!(
            "train AUC {best:.4} (reached 0.99 at epoch {}), {}",
            reached.map_or("never".into(), |e| (e + 1).to_string()),
            minutes(elapsed)
        ),
    )
}

fn toy_cohort() -> Vec<PatientStudy> {
    let g = GeneratorConfig::toy();
    (0..128).map(|i| synth_study(i, COHORT_SEED, &g).unwrap()).collect()
}

fn run_cv(studies: &[PatientStudy], variant: Variant) -> Result<(CrossValidation, Duration), String> {
    let start = Instant::now();
    let model = ModelConfig { variant, ..ModelConfig::toy() };
    let cv = cross_validate(studies, CV_FOLDS, &model, &TrainConfig::toy(), 1).map_err(|e| e.to_string())?;
    Ok((cv, start.elapsed()))
}

fn fold_aucs(cv: &CrossValidation) -> String {
    let v: Vec<String> = cv.folds.iter().map(|f| f.metrics.roc_auc.map_or("n/a".into(), |a| format!("{a:.3}"))).collect();
    v.join(" ")
}

fn criterion_5_learning(studies: &[PatientStudy]) -> Outcome {
    let (scanet, t1) = run_cv(studies, Variant::Scanet)?;
    let (baseline, t2) = run_cv(studies, Variant::Baseline)?;
    let s = scanet.report.roc_auc.mean.unwrap_or(0.0);
    let b = baseline.report.roc_auc.mean.unwrap_or(0.0);
    ensure(
        s >= 0.90 && s >= b && t1 + t2 < Duration::from_secs(7200),
        format!(
            "SCANet mean AUC {s:.4} [{}] vs baseline {b:.4} [{}], {}",
            fold_aucs(&scanet),
            fold_aucs(&baseline),
            minutes(t1 + t2)
        ),
    )
}

fn criterion_6_null(studies: &[PatientStudy]) -> Outcome {
    let labels: Vec<u8> = studies.iter().map(|s| s.label).collect();
    let permuted = permute_labels(&labels, COHORT_SEED ^ 0xA5A5);
    let shuffled: Vec<PatientStudy> = studies
        .iter()
        .zip(permuted)
        .map(|(s, l)| PatientStudy { label: l, ..s.clone() })
        .collect();
    let (cv, t) = run_cv(&shuffled, Variant::Scanet)?;
    let m = cv.report.roc_auc.mean.unwrap_or(f64::NAN);
    ensure(
        (0.35..=0.65).contains(&m),
        format!("permuted-label mean AUC {m:.4} [{}], {}", fold_aucs(&cv), minutes(t)),
    )
}

fn criterion_7_paper_scale() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::paper_scale();
    let g = GeneratorConfig::paper_scale();
    let studies: Vec<PatientStudy> = (0..2).map(|i| synth_study(i, 7, &g).unwrap()).collect();
    let x = stack_studies(&studies.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let net = ScaNet::new(&cfg, 7).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let out = net.forward(&x, Some(&mut rng), false).map_err(|e| e.to_string())?;
    let p = out.probabilities.to_vec();
    let loss = cross_entropy_loss(&out.probabilities, &[0, 1]).map_err(|e| e.to_string())?;
    loss.backward().map_err(|e| e.to_string())?;
    let finite_grads = net.params().tensors().iter().all(|t| t.grad().is_some_and(|g| g.iter().all(|v| v.is_finite())));
    let sum_err = p.chunks(2).map(|r| ((r[0] + r[1]) as f64 - 1.0).abs()).fold(0.0, f64::max);
    ensure(
        x.shape() == [52, 2, 224, 224] && p.iter().all(|v| v.is_finite()) && finite_grads && sum_err <= 1e-6,
        format!(
            "input {:?}, {} parameters, loss {:.4}, probability sum error {sum_err:.1e}, gradients finite: {finite_grads}, {}",
            x.shape(),
            net.parameter_count(),
            loss.item().unwrap_or(f32::NAN),
            minutes(start.elapsed())
        ),
    )
}

fn criterion_8_determinism() -> Outcome {
    let g = GeneratorConfig::toy();
    let studies: Vec<PatientStudy> = (0..24).map(|i| synth_study(i, 8, &g).unwrap()).collect();
    let refs: Vec<&PatientStudy> = studies.iter().collect();
    let trace = || -> Result<Vec<u64>, String> {
        let net = ScaNet::new(&ModelConfig::toy(), 8).map_err(|e| e.to_string())?;
        let cfg = TrainConfig { max_epochs: 5, seed: 8, ..TrainConfig::toy() };
        let out = train(&net, &refs, &cfg).map_err(|e| e.to_string())?;
        Ok(out.history.train_losses().iter().map(|v| v.to_bits()).collect())
    };
    let (a, b) = (trace()?, trace()?);

    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        generate_synthetic_cohort(6, 8, &g, d.path()).map_err(|e| e.to_string())?;
    }
    let mut names: Vec<_> = fs::read_dir(dirs[0].path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let identical = names.len() == 7
        && names.iter().all(|n| fs::read(dirs[0].path().join(n)).unwrap() == fs::read(dirs[1].path().join(n)).unwrap());
    ensure(
        a.len() == 5 && a == b && identical,
        format!(
            "5-epoch loss traces bitwise equal: {}; {} cohort files byte-identical: {identical}",
            a == b,
            names.len()
        ),
    )
}

fn criterion_9_formats() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let study = synth_study(1, 9, &GeneratorConfig::toy()).unwrap();
    let path = dir.path().join("s.scv");
    save_study(&path, &study).map_err(|e| e.to_string())?;
    let back = load_study(&path).map_err(|e| e.to_string())?;
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let odd: Vec<f32> = (0..2 * 2 * 3 * 5).map(|_| f32::from_bits(rng.next_u32() & 0xff7f_ffff)).collect();
    let odd = PatientStudy::new("odd", (2, 3, 5), odd[..30].to_vec(), odd[30..].to_vec(), 1).unwrap();
    let odd_back = decode_study(&encode_study(&odd).unwrap(), "odd").unwrap();
    let scv_ok = back.dims() == study.dims()
        && back.label == study.label
        && bits(&back.ct) == bits(&study.ct)
        && bits(&back.cta) == bits(&study.cta)
        && bits(&odd_back.ct) == bits(&odd.ct)
        && bits(&odd_back.cta) == bits(&odd.cta);

    let net = ScaNet::new(&ModelConfig::toy(), 9).unwrap();
    for t in net.params().tensors() {
        let v: Vec<f32> = (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        t.assign(&v).unwrap();
    }
    let ckpt = dir.path().join("m.sckp");
    net.save(&ckpt).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let ckpt_ok = loaded.len() == net.params().entries().len()
        && net.params().entries().iter().zip(&loaded).all(|((n1, t1), (n2, t2))| {
            n1 == n2 && t1.shape() == t2.shape() && bits(&t1.to_vec()) == bits(&t2.to_vec())
        });
    let fresh = ScaNet::new(&ModelConfig::toy(), 10).unwrap();
    fresh.load_weights(&ckpt).map_err(|e| e.to_string())?;
    let reload_ok = fresh.params().snapshot() == net.params().snapshot();

    let size = study_file_size(26, 224, 224);
    ensure(
        scv_ok && ckpt_ok && reload_ok && size == 10_436_624,
        format!(
            "SCV1 round trip bitwise: {scv_ok}; checkpoint of {} tensors bitwise: {}; paper-scale study file {size} bytes",
            loaded.len(),
            ckpt_ok && reload_ok
        ),
    )
}

#[test]
fn primary_acceptance_criteria() {
    let studies = toy_cohort();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 gradient suite", Box::new(criterion_1_gradients)),
        ("2 oracle equivalence", Box::new(criterion_2_oracles)),
        ("3 architecture invariants", Box::new(criterion_3_architecture)),
        ("4 overfit check", Box::new(criterion_4_overfit)),
        ("5 learning check", Box::new(|| criterion_5_learning(&studies))),
        ("6 null check", Box::new(|| criterion_6_null(&studies))),
        ("7 paper-scale smoke test", Box::new(criterion_7_paper_scale)),
        ("8 determinism", Box::new(criterion_8_determinism)),
        ("9 format contracts", Box::new(criterion_9_formats)),
    ];
    let mut failed = Vec::new();
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => report(&format!("acceptance criterion {name}: PASS | {detail}")),
            Err(detail) => {
                report(&format!("acceptance criterion {name}: FAIL | {detail}"));
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
