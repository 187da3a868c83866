use iaraudit_core::attacks::catalog::{score_all, AttackId, AttackName, Variant};
use iaraudit_core::extraction::{
    complete_from_prefix, select_candidates, LabeledSequence, Model, Similarity, TokenSimilarity,
};
use iaraudit_core::metrics::{auc, spearman};
use iaraudit_core::sim::discrete::fit_discrete;
use iaraudit_core::sim::export::{export_discrete, TraceConfig};
use iaraudit_core::sim::{generate_corpus, CorpusSample, Role, SimConfig};
use iaraudit_core::trace::{Mode, Split};
use serde_json::Value;

/// Two-sample Kolmogorov-Smirnov p-value from the asymptotic distribution.
fn ks_p_value(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    let ne = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

#[test]
fn member_and_nonmember_token_marginals_match() {
    let cfg = SimConfig::default();
    let corpus = generate_corpus(&cfg).unwrap();
    for pos in [0, 1, cfg.seq_len / 2, cfg.seq_len - 1] {
        let column = |role| -> Vec<f64> { corpus.with_role(role).map(|s| f64::from(s.discrete[pos])).collect() };
        let p = ks_p_value(&column(Role::Member), &column(Role::Nonmember));
        assert!(p > 0.001, "position {pos}: p = {p}");
    }
}

#[test]
fn ks_helper_rejects_shifted_samples() {
    let a: Vec<f64> = (0..500).map(|i| f64::from(i) / 500.0).collect();
    let b: Vec<f64> = a.iter().map(|x| x + 0.2).collect();
    assert!(ks_p_value(&a, &b) < 1e-6);
    assert!(ks_p_value(&a, &a) > 0.99);
}

fn loss_auc(smoothing: f64, seed: u64) -> f64 {
    let cfg = SimConfig {
        smoothing,
        seed,
        ..SimConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let model = fit_discrete(&corpus, &cfg).unwrap();
    let eval: Vec<&CorpusSample> = corpus.evaluation().collect();
    let tc = TraceConfig {
        include_diff: false,
        include_repeated: false,
        ..TraceConfig::default()
    };
    let (_, traces) = export_discrete(&model, &eval, &tc, Value::Null).unwrap();
    let loss = AttackId::new(AttackName::Loss, Variant::Cond);
    let table = score_all(&traces, Mode::Discrete, std::slice::from_ref(&loss));
    auc(
        &table.values(&loss, Split::Member),
        &table.values(&loss, Split::Nonmember),
    )
    .unwrap()
}

#[test]
fn heavy_smoothing_erases_membership_signal() {
    // Single corpora sit about 0.009 (one null std) around 0.5, so the
    // tolerance applies to the mean over ten draws.
    let aucs: Vec<f64> = (1..=10).map(|seed| loss_auc(1e6, seed)).collect();
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.02, "aucs {aucs:?}");
    assert!(aucs.iter().all(|a| (a - 0.5).abs() <= 0.04), "aucs {aucs:?}");
}

#[test]
fn loss_auc_falls_as_smoothing_grows() {
    let grid = [1e-6, 0.01, 0.1, 1.0, 10.0];
    let aucs: Vec<f64> = grid.iter().map(|&l| loss_auc(l, 7)).collect();
    let rho = spearman(&grid, &aucs).unwrap();
    assert!(rho < 0.0, "aucs {aucs:?}");
    assert!(aucs[0] > aucs[4], "aucs {aucs:?}");
}

#[test]
fn close_candidates_complete_more_faithfully() {
    let cfg = SimConfig {
        smoothing: 0.01,
        ..SimConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let model = fit_discrete(&corpus, &cfg).unwrap();
    let training: Vec<LabeledSequence> = corpus.training().map(LabeledSequence::from).collect();
    let candidates = select_candidates(Model::Discrete(&model), &training, 40, 7).unwrap();
    let by_id: std::collections::HashMap<&str, &LabeledSequence> =
        training.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut distance = Vec::new();
    let mut similarity = Vec::new();
    for c in &candidates {
        let s = by_id[c.sample_id.as_str()];
        let completion = complete_from_prefix(Model::Discrete(&model), s, 8).unwrap();
        distance.push(c.distance);
        similarity.push(TokenSimilarity.similarity(&s.tokens, &completion).unwrap());
    }
    let rho = spearman(&distance, &similarity).unwrap();
    assert!(rho < 0.0, "rho {rho}");
}

#[test]
fn duplicated_canary_is_reproduced_from_its_prefix() {
    let cfg = SimConfig {
        smoothing: 0.01,
        ..SimConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let model = fit_discrete(&corpus, &cfg).unwrap();
    let canary = LabeledSequence::from(corpus.with_role(Role::Canary).next().unwrap());
    let completion = complete_from_prefix(Model::Discrete(&model), &canary, 8).unwrap();
    assert_eq!(completion, canary.tokens);
}
