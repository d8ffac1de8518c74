//! Acceptance checks. Runs without the libtest harness so every check prints
//! exactly one PASS or FAIL line; the process exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use propinfer::experiment::{ablation_sweep, lab_config, AblationAxis, AttackConfig, GenerationAttack, WordFreqAttack};
use propinfer::par::Parallel;
use propinfer_core::corpus::{positive_count, subsample_to_ratio};
use propinfer_core::exec::Executor;
use propinfer_core::features::{select_keywords, FrequencyKind, FrequencyMatrix, Vocabulary};
use propinfer_core::gen_attack::{aggregate, estimate_ratio_per_prompt, run_generation_attack, Aggregation, PromptEstimate, PromptSet};
use propinfer_core::shadow::{build_shadow_plan, ratio_grid, run_wordfreq_shadow_attack, SyntheticFactory, WordFreqConfig};
use propinfer_core::{
    build_generator, mae, sequence_perplexity, Error, FineTuneMode, GbtParams, KeywordLabeler, LabelValue,
    LabeledDataset, MetaRegressor, PropertySpec, Sample, Side, SyntheticModel, TextModel, VocabSpec,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 9] = [
        ("generation attack converges at 500 samples", generation_convergence),
        ("QA mode hides input-side properties", mode_asymmetry),
        ("word-frequency shadow attack end to end", wordfreq_end_to_end),
        ("keyword selection matches least-squares F", selection_oracle),
        ("perplexity and mixture log-probs are exact", perplexity_exactness),
        ("estimator identities", estimator_identities),
        ("subsampling hits the rounded ratio exactly", subsampling_exactness),
        ("meta-regressor properties", meta_regressor_properties),
        ("ablations improve with more evidence", ablation_monotonicity),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn property(v: &VocabSpec) -> PropertySpec {
    let (pos, neg) = v.signal_words(true, true);
    let pos: Vec<&str> = pos.iter().map(String::as_str).collect();
    let neg: Vec<&str> = neg.iter().map(String::as_str).collect();
    PropertySpec::keywords("gender", &pos, &neg)
}

fn lab(ratio: f64, mode: FineTuneMode, vocab: &VocabSpec, seed: u64) -> SyntheticModel {
    build_generator(ratio, mode, vocab.clone(), 30, seed).unwrap()
}

/// Mean generation-attack MAE over `seeds` for each target.
fn generation_maes(mode: FineTuneMode, vocab: &VocabSpec, targets: &[f64], seeds: u64, n: usize) -> Vec<f64> {
    let labeler = KeywordLabeler::new(&property(vocab));
    let jobs = targets.len() * seeds as usize;
    Parallel::new().run(jobs, |k| {
        let (r, seed) = (targets[k / seeds as usize], (k % seeds as usize) as u64);
        let est = run_generation_attack(
            &lab(r, mode, vocab, seed),
            &PromptSet::default(),
            n,
            &labeler,
            seed,
            Aggregation::Unweighted,
        )
        .unwrap();
        mae(est.value, r).unwrap()
    })
}

fn generation_convergence() -> Result<String, String> {
    let start = Instant::now();
    let maes = generation_maes(FineTuneMode::ChatCompletionMode, &VocabSpec::lab_default(), &[0.3, 0.5, 0.7], 50, 500);
    let took = start.elapsed();
    let m = mean(&maes);
    ensure(
        m < 0.02 && took < Duration::from_secs(60),
        format!("mean MAE {m:.4} over {} runs (need < 0.02) in {:.1}s (need < 60s)", maes.len(), took.as_secs_f64()),
    )
}

fn mode_asymmetry() -> Result<String, String> {
    let v = VocabSpec::lab_input_only();
    let qa = mean(&generation_maes(FineTuneMode::QaMode, &v, &[0.3, 0.7], 20, 500));
    let cc = mean(&generation_maes(FineTuneMode::ChatCompletionMode, &v, &[0.3, 0.7], 20, 500));
    let gap = qa - cc;

    // containment of input-side signal words must not move with r at all
    let mut drift = Vec::new();
    for vocab in [VocabSpec::lab_default(), VocabSpec::lab_input_only(), VocabSpec::lab_default().with_boost(1.0)] {
        let base = lab(0.0, FineTuneMode::QaMode, &vocab, 0);
        for i in 1..=20 {
            let m = lab(i as f64 / 20.0, FineTuneMode::QaMode, &vocab, i);
            for w in vocab.x_signal_pos.iter().chain(&vocab.x_signal_neg) {
                let (a, b) = (base.expected_containment(w).unwrap(), m.expected_containment(w).unwrap());
                if a != b {
                    drift.push(format!("{w}: {a} vs {b}"));
                }
            }
        }
    }
    ensure(
        gap >= 0.15 && drift.is_empty(),
        format!(
            "QA MAE {qa:.4} - CC MAE {cc:.4} = {gap:.4} (need >= 0.15); input-side containment constant in r: {}",
            if drift.is_empty() { "yes".to_string() } else { drift.join("; ") }
        ),
    )
}

fn wordfreq_end_to_end() -> Result<String, String> {
    let start = Instant::now();
    let v = VocabSpec::lab_default();
    let factory = SyntheticFactory {
        property: "gender".into(),
        mode: FineTuneMode::ChatCompletionMode,
        vocab: v.clone(),
        sample_len: 30,
    };
    let exec = Parallel::new();
    let preds: Vec<f64> = (0..20u64)
        .map(|seed| {
            let aux = lab(0.5, FineTuneMode::ChatCompletionMode, &v, 10_000 + seed).draw_records(2000, seed, "gender");
            let (plan, sets) = build_shadow_plan(&aux, "gender", &ratio_grid(0.2, 0.8, 7), 5, 500, seed).unwrap();
            let cfg = WordFreqConfig {
                prompts: PromptSet::default(),
                n_gen: 2000,
                d_keywords: 10,
                gbt: GbtParams::default(),
                kind: FrequencyKind::Containment,
                seed,
            };
            let target = lab(0.5, FineTuneMode::ChatCompletionMode, &v, 20_000 + seed);
            run_wordfreq_shadow_attack(&plan, &sets, &factory, &target, &cfg, &exec)
                .unwrap()
                .report
                .prediction
        })
        .collect();
    let took = start.elapsed();
    let hits = preds.iter().filter(|p| (*p - 0.5).abs() <= 0.1).count();
    let worst = preds.iter().map(|p| (p - 0.5).abs()).fold(0.0, f64::max);
    ensure(
        hits >= 18 && took < Duration::from_secs(600),
        format!(
            "{hits}/20 runs within 0.1 of 0.5 (need >= 18), worst error {worst:.4}, in {:.1}s (need < 600s)",
            took.as_secs_f64()
        ),
    )
}

/// F from an explicit fit of `y = b0 + b1 x` by the normal equations:
/// `(TSS - RSS) / (RSS / (m - 2))`.
fn least_squares_f(x: &[f64], y: &[f64]) -> f64 {
    let m = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = m * sxx - sx * sx;
    let ybar = sy / m;
    let tss: f64 = y.iter().map(|b| (b - ybar) * (b - ybar)).sum();
    if det.abs() <= 1e-12 * m * sxx.max(1.0) || tss == 0.0 {
        return 0.0;
    }
    let b1 = (m * sxy - sx * sy) / det;
    let b0 = (sy - b1 * sx) / m;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - b0 - b1 * a).powi(2)).sum();
    if rss <= 0.0 {
        return f64::INFINITY;
    }
    (tss - rss) / (rss / (m - 2.0))
}

fn selection_oracle() -> Result<String, String> {
    let ratios: Vec<f64> = ratio_grid(0.2, 0.8, 7).into_iter().flat_map(|r| [r; 5]).collect();
    let words: Vec<String> = (0..200).map(|j| format!("w{j:03}")).collect();
    let mut mismatches = Vec::new();
    for trial in 0..25u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let mut cols: Vec<Vec<f64>> = (0..200).map(|_| ratios.iter().map(|_| rng.gen::<f64>()).collect()).collect();
        let mut slots: Vec<usize> = (0..200).collect();
        slots.shuffle(&mut rng);
        // five planted columns with rising noise; the last two are equal so
        // the ranking has to break a tie
        for (k, &j) in slots[..4].iter().enumerate() {
            let slope = if k % 2 == 0 { 0.6 } else { -0.4 };
            let noise = 0.02 * (k + 1) as f64;
            cols[j] = ratios.iter().map(|r| 0.5 + slope * r + noise * (rng.gen::<f64>() - 0.5)).collect();
        }
        cols[slots[4]] = cols[slots[3]].clone();
        cols[slots[5]] = vec![0.25; ratios.len()];
        let values: Vec<Vec<f64>> = (0..ratios.len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let matrix = FrequencyMatrix::new(
            (0..ratios.len()).map(|i| format!("m{i}")).collect(),
            Vocabulary::from_words(words.iter().cloned()),
            values,
        )
        .unwrap();
        let got = select_keywords(&matrix, &ratios, 5).unwrap().keywords;

        let mut oracle: Vec<(f64, &String)> = cols.iter().zip(&words).map(|(c, w)| (least_squares_f(c, &ratios), w)).collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let want: Vec<String> = oracle[..5].iter().map(|(_, w)| (*w).clone()).collect();
        let mut planted: Vec<String> = slots[..5].iter().map(|&j| words[j].clone()).collect();
        planted.sort();
        let mut got_sorted = got.clone();
        got_sorted.sort();
        if got != want || got_sorted != planted {
            mismatches.push(format!("trial {trial}: {got:?} vs {want:?}"));
        }
    }
    ensure(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "ordered top-5 identical to the oracle on 25 planted 35x200 matrices, tie included".into()
        } else {
            mismatches.join("; ")
        },
    )
}

fn perplexity_exactness() -> Result<String, String> {
    let uniform = lab(0.5, FineTuneMode::ChatCompletionMode, &VocabSpec::uniform(16), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst_ppl: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=120);
        let text: Vec<&str> = (0..len).map(|_| uniform.words()[rng.gen_range(0..16)].as_str()).collect();
        let ppl = sequence_perplexity(&uniform, &text.join(" ")).unwrap();
        worst_ppl = worst_ppl.max((ppl - 16.0).abs());
    }

    let mut worst_lp: f64 = 0.0;
    let mut checked = 0;
    for mode in [FineTuneMode::ChatCompletionMode, FineTuneMode::QaMode] {
        for boost in [0.1, 0.5, 1.0] {
            let vocab = VocabSpec::lab_default().with_boost(boost);
            for (i, r) in [0.0, 0.13, 0.5, 0.77, 1.0].into_iter().enumerate() {
                let m = lab(r, mode, &vocab, i as u64);
                for w in vocab.universe() {
                    for side in [Side::Input, Side::Output] {
                        let p0 = m.token_prob(&w, side, false).unwrap();
                        let p1 = m.token_prob(&w, side, true).unwrap();
                        let oracle = (r * p1 + (1.0 - r) * p0).ln();
                        let got = m.exact_token_logprob(&w, side).unwrap();
                        let err = if oracle == got { 0.0 } else { (oracle - got).abs() };
                        worst_lp = worst_lp.max(err);
                        checked += 1;
                    }
                }
                // scored sequences agree with the per-token oracle too
                for text in m.generate_batch("p", 5, 1).unwrap().texts {
                    let lps = m.score_logprobs(&text).unwrap();
                    for (pos, (tok, lp)) in text.split_whitespace().zip(&lps).enumerate() {
                        let want = m.exact_token_logprob(tok, m.side_at(pos)).unwrap();
                        worst_lp = worst_lp.max((want - lp).abs());
                    }
                }
            }
        }
    }
    ensure(
        worst_ppl <= 1e-9 && worst_lp <= 1e-12,
        format!(
            "max |ppl - 16| = {worst_ppl:.2e} on 1000 sequences (need <= 1e-9); max log-prob error {worst_lp:.2e} over {checked} mixtures (need <= 1e-12)"
        ),
    )
}

fn estimator_identities() -> Result<String, String> {
    use LabelValue::{NotApplicable as Na, One, Zero};
    let (r, valid, na) = estimate_ratio_per_prompt(&[One, Zero, One, Na]).unwrap();
    let all_na = estimate_ratio_per_prompt(&[Na, Na, Na]);
    let est = |rhat: f64, valid: usize| PromptEstimate {
        prompt: String::new(),
        rhat,
        valid,
        na: 0,
    };
    let agg = aggregate(&[est(0.2, 5), est(0.4, 5)], Aggregation::Unweighted).unwrap();
    let m = mae(0.3173, 0.30).unwrap();
    let ok = r == 2.0 / 3.0
        && (valid, na) == (3, 1)
        && matches!(all_na, Err(Error::AllNotApplicable))
        && agg == 0.3
        && m == 0.0173;
    ensure(
        ok,
        format!("[1,0,1,NA] -> {r:?} (valid {valid}, na {na}); all-NA -> {all_na:?}; mean(0.2, 0.4) = {agg:?}; mae(0.3173, 0.30) = {m:?}"),
    )
}

fn subsampling_exactness() -> Result<String, String> {
    let mut samples = Vec::new();
    for i in 0..900 {
        let label = match i % 9 {
            0..=3 => LabelValue::One,
            4..=7 => LabelValue::Zero,
            _ => LabelValue::NotApplicable,
        };
        samples.push(Sample::new("", &format!("row {i}"), "x").with_label("p", label));
    }
    let pool = LabeledDataset::new(samples, "pool");
    let (avail_one, avail_zero) = (400, 400);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = Vec::new();
    let mut cases = 0;
    while cases < 1000 {
        let ratio = if rng.gen_bool(0.3) { rng.gen_range(0..=20) as f64 / 20.0 } else { rng.gen::<f64>() };
        let size = rng.gen_range(1..=800);
        let ones = (ratio * size as f64).round() as usize;
        if ones > avail_one || size - ones > avail_zero {
            continue;
        }
        cases += 1;
        let seed = rng.gen();
        let a = subsample_to_ratio(&pool, "p", ratio, size, seed).unwrap();
        let b = subsample_to_ratio(&pool, "p", ratio, size, seed).unwrap();
        let got_ones = a.samples.iter().filter(|s| s.label("p") == Some(LabelValue::One)).count();
        let got_zero = a.samples.iter().filter(|s| s.label("p") == Some(LabelValue::Zero)).count();
        let achieved = got_ones as f64 / size as f64;
        let mut distinct: Vec<&str> = a.samples.iter().map(|s| s.input.as_str()).collect();
        distinct.sort();
        distinct.dedup();
        if achieved != ones as f64 / size as f64
            || got_ones + got_zero != size
            || positive_count(ratio, size) != ones
            || distinct.len() != size
            || a.samples != b.samples
        {
            bad.push(format!("r={ratio} n={size}: {got_ones} positives, want {ones}"));
        }
    }
    ensure(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{cases} random feasible cases exact, without replacement and reproducible")
        } else {
            bad.join("; ")
        },
    )
}

fn meta_regressor_properties() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut problems = Vec::new();
    for case in 0..100 {
        let rows = rng.gen_range(4..40);
        let dim = rng.gen_range(1..6);
        let x: Vec<Vec<f64>> = (0..rows).map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let y: Vec<f64> = if case % 3 == 0 {
            (0..rows).map(|_| if rng.gen_bool(0.5) { 0.0 } else { 1.0 }).collect()
        } else {
            x.iter().map(|r| (0.5 + 0.3 * r[0].sin() + 0.05 * rng.gen::<f64>()).clamp(0.0, 1.0)).collect()
        };
        let params = GbtParams {
            n_rounds: rng.gen_range(5..60),
            learning_rate: [0.05, 0.1, 0.3, 1.0][rng.gen_range(0..4)],
            max_depth: rng.gen_range(1..5),
            min_leaf: rng.gen_range(1..5),
            row_subsample: 1.0,
            seed: case,
        };
        let (model, trace) = MetaRegressor::fit_traced(&x, &y, &params).unwrap();
        if let Some(i) = (1..trace.len()).find(|&i| trace[i] > trace[i - 1]) {
            problems.push(format!("case {case}: MSE rose at round {i}: {} -> {}", trace[i - 1], trace[i]));
        }
        let back: MetaRegressor = serde_json::from_str(&serde_json::to_string(&model).unwrap()).unwrap();
        let c = rng.gen::<f64>();
        let flat = MetaRegressor::fit(&x, &vec![c; rows], &params).unwrap();
        for _ in 0..50 {
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1e3..1e3)).collect();
            let p = model.predict(&q).unwrap();
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("case {case}: prediction {p} outside [0, 1]"));
            }
            if back.predict(&q).unwrap().to_bits() != p.to_bits() {
                problems.push(format!("case {case}: JSON round trip changed a prediction"));
            }
            if flat.predict(&q).unwrap() != c {
                problems.push(format!("case {case}: constant target {c} not reproduced"));
            }
        }
    }
    problems.dedup();
    ensure(
        problems.is_empty(),
        if problems.is_empty() {
            "100 random datasets: MSE nonincreasing, constants exact, outputs in [0, 1], JSON round trip identical".into()
        } else {
            problems.join("; ")
        },
    )
}

/// Upper 95% quantile of Student's t with `df` degrees of freedom
/// (Cornish-Fisher expansion around the normal quantile).
fn t95(df: f64) -> f64 {
    let z: f64 = 1.6448536269514722;
    z + (z.powi(3) + z) / (4.0 * df)
        + (5.0 * z.powi(5) + 16.0 * z.powi(3) + 3.0 * z) / (96.0 * df * df)
        + (3.0 * z.powi(7) + 19.0 * z.powi(5) + 17.0 * z.powi(3) - 15.0 * z) / (384.0 * df.powi(3))
}

/// One-sided paired t statistic for "`more` has larger MAE than `fewer`".
fn paired_t(fewer: &[f64], more: &[f64]) -> f64 {
    let d: Vec<f64> = more.iter().zip(fewer).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let sd = (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return if m > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    m / (sd / n.sqrt())
}

fn ablation_monotonicity() -> Result<String, String> {
    let exec = Parallel::new();
    let wf = WordFreqAttack {
        ratios: ratio_grid(0.2, 0.8, 7),
        repeats: 2,
        shadow_size: 300,
        n_gen: 500,
        d_keywords: 10,
        prompts: PromptSet::default(),
        gbt: GbtParams::default(),
        frequency: FrequencyKind::Containment,
    };
    let seeds: Vec<u64> = (0..20).collect();
    let cfg = lab_config(FineTuneMode::ChatCompletionMode, &[0.35, 0.65], vec![AttackConfig::ShadowWordfreq(wf)], seeds.clone());
    let shadow = ablation_sweep(&cfg, AblationAxis::ShadowCount, &[14, 21, 35], &exec).map_err(|e| e.to_string())?;
    if shadow.iter().any(|p| p.failed > 0) {
        return Err("a shadow-count cell failed".into());
    }
    let crit = t95(shadow[0].maes.len() as f64 - 1.0);
    let t1 = paired_t(&shadow[0].maes, &shadow[1].maes);
    let t2 = paired_t(&shadow[1].maes, &shadow[2].maes);
    let means: Vec<f64> = shadow.iter().map(|p| p.mean_mae.unwrap()).collect();

    let gen = AttackConfig::Generation(GenerationAttack {
        n_per_prompt: 100,
        prompts: PromptSet::default(),
        aggregation: Aggregation::Unweighted,
    });
    let cfg = lab_config(FineTuneMode::ChatCompletionMode, &[0.3, 0.5, 0.7], vec![gen], seeds);
    let counts = ablation_sweep(&cfg, AblationAxis::GenCount, &[100, 2000], &exec).map_err(|e| e.to_string())?;
    let (g100, g2000) = (counts[0].mean_mae.unwrap(), counts[1].mean_mae.unwrap());

    ensure(
        t1 < crit && t2 < crit && g2000 <= g100,
        format!(
            "shadow count 14/21/35 mean MAE {:.4}/{:.4}/{:.4}, paired t for an increase {t1:.2} and {t2:.2} (reject nonincrease at t >= {crit:.3}); generations 100 vs 2000 mean MAE {g100:.4} vs {g2000:.4}",
            means[0], means[1], means[2]
        ),
    )
}
