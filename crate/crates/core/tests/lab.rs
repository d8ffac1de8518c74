//! Attacks and estimators checked against the synthetic lab's closed forms.

use propinfer_core::corpus::KeywordLabeler;
use propinfer_core::exec::Sequential;
use propinfer_core::features::{containment_frequency, FrequencyKind};
use propinfer_core::gen_attack::{run_generation_attack, Aggregation, PromptSet};
use propinfer_core::report::FLAG_ZERO_SIGNAL;
use propinfer_core::shadow::{
    build_shadow_plan, ratio_grid, run_perplexity_shadow_attack, run_wordfreq_shadow_attack,
    SyntheticFactory, WordFreqConfig,
};
use propinfer_core::{
    build_generator, sequence_perplexity, FineTuneMode, GbtParams, LabeledDataset, PropertySpec,
    Side, SyntheticModel, TextModel, VocabSpec,
};

fn lab_property(v: &VocabSpec) -> PropertySpec {
    let pos: Vec<&str> = v.x_signal_pos.iter().chain(&v.y_signal_pos).map(|s| s.as_str()).collect();
    let neg: Vec<&str> = v.x_signal_neg.iter().chain(&v.y_signal_neg).map(|s| s.as_str()).collect();
    PropertySpec::keywords("gender", &pos, &neg)
}

fn cc(ratio: f64, seed: u64) -> SyntheticModel {
    build_generator(ratio, FineTuneMode::ChatCompletionMode, VocabSpec::lab_default(), 30, seed).unwrap()
}

#[test]
fn monte_carlo_containment_matches_oracle() {
    let n = 10_000;
    for (mode, ratio) in [
        (FineTuneMode::ChatCompletionMode, 0.3),
        (FineTuneMode::ChatCompletionMode, 0.8),
        (FineTuneMode::QaMode, 0.3),
    ] {
        let m = build_generator(ratio, mode, VocabSpec::lab_default().with_boost(0.1), 30, 5).unwrap();
        let set = m.generate_batch("prompt", n, 17).unwrap();
        let v = m.vocab();
        for w in v.x_signal_pos.iter().chain(&v.x_signal_neg).chain(&v.y_signal_pos).chain(&v.y_signal_neg) {
            let mu = m.expected_containment(w).unwrap();
            let got = containment_frequency(&set, w).unwrap();
            let tol = 4.0 * (mu * (1.0 - mu) / n as f64).sqrt();
            assert!((got - mu).abs() <= tol, "{mode:?} r={ratio} {w}: {got} vs {mu} (tol {tol})");
        }
    }
}

#[test]
fn perplexity_matches_exact_logprobs() {
    for ratio in [0.0, 0.25, 0.9] {
        let m = cc(ratio, 3);
        for text in m.generate_batch("p", 20, 1).unwrap().texts {
            let oracle: f64 = text
                .split_whitespace()
                .enumerate()
                .map(|(i, t)| {
                    let side = if i < 30 { Side::Input } else { Side::Output };
                    m.exact_token_logprob(t, side).unwrap()
                })
                .sum::<f64>();
            let n = text.split_whitespace().count() as f64;
            let expected = (-oracle / n).exp();
            let got = sequence_perplexity(&m, &text).unwrap();
            assert!((got - expected).abs() <= 1e-9 * expected, "{got} vs {expected}");
        }
    }
}

#[test]
fn split_batches_share_statistics() {
    // n1 + n2 under fresh seeds looks like one batch of n1 + n2
    let m = cc(0.4, 8);
    let a = m.generate_batch("p", 3000, 1).unwrap();
    let b = m.generate_batch("p", 2000, 2).unwrap();
    let whole = m.generate_batch("p", 5000, 3).unwrap();
    for w in ["she", "his", "ovarian", "pain"] {
        let mu = m.expected_containment(w).unwrap();
        let split = (containment_frequency(&a, w).unwrap() * 3000.0
            + containment_frequency(&b, w).unwrap() * 2000.0)
            / 5000.0;
        let full = containment_frequency(&whole, w).unwrap();
        let tol = 4.0 * (2.0 * mu * (1.0 - mu) / 5000.0).sqrt();
        assert!((split - full).abs() <= tol.max(1e-3), "{w}: {split} vs {full}");
    }
    assert_eq!(m.generate_batch("p", 50, 1).unwrap().texts, a.texts[..50]);
}

#[test]
fn generation_attack_recovers_cc_ratio() {
    let v = VocabSpec::lab_default();
    let labeler = KeywordLabeler::new(&lab_property(&v));
    for seed in 0..5 {
        let est = run_generation_attack(
            &cc(0.5, seed),
            &PromptSet::default(),
            2000,
            &labeler,
            seed,
            Aggregation::Unweighted,
        )
        .unwrap();
        assert!((est.value - 0.5).abs() <= 0.04, "seed {seed}: {}", est.value);
        assert_eq!(est.n_total, 6000);
        for p in &est.per_prompt {
            assert_eq!(p.valid + p.na, 2000);
        }
    }
}

#[test]
fn generation_attack_is_blind_in_qa_mode_for_input_property() {
    let v = VocabSpec::lab_input_only();
    let labeler = KeywordLabeler::new(&lab_property(&v));
    let run = |ratio: f64, seed: u64| {
        let m = build_generator(ratio, FineTuneMode::QaMode, v.clone(), 30, seed).unwrap();
        run_generation_attack(&m, &PromptSet::default(), 1000, &labeler, seed, Aggregation::Unweighted)
            .unwrap()
            .value
    };
    let lo: Vec<f64> = (0..10).map(|s| run(0.3, s)).collect();
    let hi: Vec<f64> = (0..10).map(|s| run(0.7, s)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    // both sit at the agnostic midpoint; the gap is noise, far below 0.4
    assert!((mean(&lo) - mean(&hi)).abs() < 0.02, "{} vs {}", mean(&lo), mean(&hi));
    assert!((mean(&lo) - 0.5).abs() < 0.02);
}

fn aux(n: usize, vocab: &VocabSpec) -> LabeledDataset {
    build_generator(0.5, FineTuneMode::ChatCompletionMode, vocab.clone(), 30, 99)
        .unwrap()
        .draw_records(n, 0, "gender")
}

fn factory(vocab: &VocabSpec) -> SyntheticFactory {
    SyntheticFactory {
        property: "gender".into(),
        mode: FineTuneMode::ChatCompletionMode,
        vocab: vocab.clone(),
        sample_len: 30,
    }
}

fn wordfreq(target: f64, d: usize, seed: u64) -> (f64, Vec<String>) {
    let v = VocabSpec::lab_default();
    let (plan, sets) = build_shadow_plan(&aux(600, &v), "gender", &ratio_grid(0.2, 0.8, 7), 3, 200, seed).unwrap();
    let cfg = WordFreqConfig {
        prompts: PromptSet::default(),
        n_gen: 500,
        d_keywords: d,
        gbt: GbtParams::default(),
        kind: FrequencyKind::Containment,
        seed,
    };
    let out = run_wordfreq_shadow_attack(&plan, &sets, &factory(&v), &cc(target, seed + 1000), &cfg, &Sequential)
        .unwrap();
    (out.report.prediction, out.selection.keywords)
}

#[test]
fn wordfreq_self_test() {
    // a target built exactly like one of the shadow cells
    for (target, seed) in [(0.3, 1), (0.6, 2)] {
        let (pred, _) = wordfreq(target, 10, seed);
        assert!((pred - target).abs() <= 0.05, "target {target}: {pred}");
    }
}

#[test]
fn wordfreq_single_keyword_is_a_signal_word() {
    let (pred, kw) = wordfreq(0.5, 1, 4);
    let v = VocabSpec::lab_default();
    let (pos, neg) = v.signal_words(true, true);
    assert!(pos.contains(&kw[0]) || neg.contains(&kw[0]), "picked {kw:?}");
    assert!((pred - 0.5).abs() <= 0.1, "{pred}");
}

#[test]
fn perplexity_attack_with_full_separation() {
    let v = VocabSpec::lab_default().with_boost(1.0);
    let data = aux(800, &v);
    let (plan, sets) = build_shadow_plan(&data, "gender", &ratio_grid(0.2, 0.8, 7), 3, 200, 7).unwrap();
    let holdout = build_generator(0.5, FineTuneMode::ChatCompletionMode, v.clone(), 30, 5)
        .unwrap()
        .draw_records(200, 1, "gender");
    let split = |bit: propinfer_core::LabelValue| {
        LabeledDataset::new(
            holdout.samples.iter().filter(|s| s.label("gender") == Some(bit)).cloned().collect(),
            "holdout",
        )
    };
    let s0 = split(propinfer_core::LabelValue::Zero);
    let s1 = split(propinfer_core::LabelValue::One);
    for target in [0.35, 0.5, 0.65] {
        let out = run_perplexity_shadow_attack(
            &plan,
            &sets,
            &factory(&v),
            &build_generator(target, FineTuneMode::ChatCompletionMode, v.clone(), 30, 1).unwrap(),
            &s0,
            &s1,
            &GbtParams::default(),
            3,
            &Sequential,
        )
        .unwrap();
        assert!((out.report.prediction - target).abs() <= 0.15, "{target}: {}", out.report.prediction);
        assert!(!out.report.has_flag(FLAG_ZERO_SIGNAL));
    }

}

#[test]
fn identical_neutral_holdouts_flag_zero_signal() {
    let v = VocabSpec::lab_default();
    let (plan, sets) = build_shadow_plan(&aux(600, &v), "gender", &ratio_grid(0.2, 0.8, 7), 2, 100, 7).unwrap();
    let text = |label| {
        LabeledDataset::new(
            vec![propinfer_core::Sample::new("", "pain fever", "rest water").with_label("gender", label)],
            "neutral",
        )
    };
    let out = run_perplexity_shadow_attack(
        &plan,
        &sets,
        &factory(&v),
        &cc(0.5, 1),
        &text(propinfer_core::LabelValue::Zero),
        &text(propinfer_core::LabelValue::One),
        &GbtParams::default(),
        3,
        &Sequential,
    )
    .unwrap();
    assert!(out.report.has_flag(FLAG_ZERO_SIGNAL));
    assert!(out.records.iter().all(|r| r.features == out.records[0].features));
    let mean = plan.ratios.iter().sum::<f64>() / plan.ratios.len() as f64;
    assert!((out.report.prediction - mean).abs() < 1e-12, "{}", out.report.prediction);
}
