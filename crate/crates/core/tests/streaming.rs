mod common;

use asd_core::model::AsdModel;
use asd_core::streaming::CreditBudget;
use num_rational::Ratio;

#[test]
fn sliding_window_matches_batch_reinference_at_full_budget() {
    let cfg = common::tiny_config();
    let model: AsdModel<f64> = AsdModel::new(&cfg.frontend, &cfg.model, 1).unwrap();
    for seed in 0..3 {
        let record = common::short_record(100 + seed, 4, 4.0);
        let full = cfg.streaming.budget.tick_budget_kflops;
        let (out, trace) = common::stream_traced(&model, &record, &cfg.streaming, |_| full);
        assert!(out.iter().all(|o| o.rows.iter().all(|r| r.predicted)));
        let (n, bad) = common::batch_reinference_mismatches(&model, &out, &trace);
        assert_eq!(n, out.iter().map(|o| o.rows.len()).sum::<usize>());
        assert_eq!(bad, 0, "meeting {seed}: {bad} of {n} predictions differ");
    }
}

#[test]
fn sliding_window_matches_batch_reinference_when_degraded() {
    let cfg = common::tiny_config();
    let model: AsdModel<f32> = AsdModel::new(&cfg.frontend, &cfg.model, 2).unwrap();
    let record = common::short_record(7, 5, 4.0);
    let cost = cfg.streaming.budget.cost_model();
    let mut credit = CreditBudget::for_rate(5, Ratio::new(9, 4), Ratio::new(15, 2));
    let (out, trace) = common::stream_traced(&model, &record, &cfg.streaming, |_| cost.budget_for(credit.next_capacity()));
    assert!(out.iter().any(|o| o.rows.iter().any(|r| !r.predicted)));
    let (n, bad) = common::batch_reinference_mismatches(&model, &out, &trace);
    assert!(n > 0);
    assert_eq!(bad, 0);
}

#[test]
fn later_inputs_never_change_earlier_outputs() {
    let records: Vec<_> = (0..2).map(|s| common::short_record(200 + s, 3, 3.0)).collect();
    let mut observable = 0;
    for seed in 0..20 {
        let t = common::causality_trial(&records, seed);
        assert!(t.prefix_identical, "trial {seed} changed output at or before tick {}", t.cut);
        observable += usize::from(t.suffix_changed);
    }
    assert!(observable >= 10, "only {observable} mutations were visible");
}

#[test]
fn spending_never_exceeds_the_tick_budget() {
    let cfg = common::tiny_config();
    let model: AsdModel<f32> = AsdModel::new(&cfg.frontend, &cfg.model, 3).unwrap();
    let record = common::short_record(9, 6, 3.0);
    let cost = cfg.streaming.budget.cost_model();
    let budgets: Vec<u64> = (0..record.tracks.len()).map(|t| cost.budget_for((t % 7) as u64) + (t as u64 * 977) % 5000).collect();
    let out = common::stream_outputs(&model, &record, &cfg.streaming, &budgets, None);
    for (o, b) in out.iter().zip(&budgets) {
        assert!(o.spent_kflops <= *b);
        let n = o.rows.iter().filter(|r| r.predicted).count() as u64;
        assert_eq!(o.spent_kflops, cost.tick_cost(n));
    }
}
