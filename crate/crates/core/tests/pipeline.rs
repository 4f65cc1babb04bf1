//! Library-level pipeline: synthetic book → OFI → frozen forecaster → MDP →
//! agents → backtest report.

use lobrl::agents::{evaluate_greedy, train_agent, AgentConfig, AgentKind};
use lobrl::env::{segment_episodes, EnvConfig, FlatPolicy, TradingEnv};
use lobrl::forecaster::{build_targets, train_forecaster, ForecasterConfig, HorizonSet, SplitFractions};
use lobrl::market_data::{generate_synthetic_stream, SyntheticParams};
use lobrl::metrics::build_report;

struct Fixture {
    env: TradingEnv,
    train: Vec<std::ops::Range<usize>>,
    test: Vec<std::ops::Range<usize>>,
}

fn fixture(seed: u64) -> Fixture {
    let stream = generate_synthetic_stream(&SyntheticParams {
        n_events: 6_000,
        seed,
        ..SyntheticParams::default()
    })
    .unwrap();
    let data = build_targets(&stream, &HorizonSet::default(), true, SplitFractions::default()).unwrap();
    let cfg = ForecasterConfig {
        hidden: vec![16],
        max_epochs: 5,
        seed,
        ..ForecasterConfig::default()
    };
    let (forecaster, report) = train_forecaster(&data, &cfg).unwrap();
    assert!(forecaster.is_frozen());
    assert!(report.best_val_mse.is_finite());
    let env = TradingEnv::new(&stream, &forecaster, EnvConfig::default()).unwrap();
    let events = |r: std::ops::Range<usize>| data.anchors[r.start]..data.anchors[r.end - 1] + 1;
    let train = segment_episodes(events(data.split.train.clone()), &env.cfg);
    let test = segment_episodes(events(data.split.test.clone()), &env.cfg);
    Fixture { env, train, test }
}

#[test]
fn every_agent_trains_and_backtests() {
    let f = fixture(1);
    let cfg = AgentConfig {
        updates: 4,
        group_size: 4,
        hidden: vec![8],
        ..AgentConfig::default()
    };
    for kind in AgentKind::ALL {
        let (agent, log) = train_agent(kind, &f.env, &f.train, &cfg, 9).unwrap();
        assert_eq!(agent.kind(), kind);
        assert_eq!(log.rows.len(), 4, "{kind}");
        assert!(log.rows.iter().all(|r| r.loss.is_finite() && r.mean_return.is_finite()));
        let trajs = evaluate_greedy(&agent, &f.env, &f.test).unwrap();
        let report = build_report("SYNTH", kind.display_name(), &trajs, 1.0, 50).unwrap();
        assert_eq!(report.episodes, trajs.len());
        assert_eq!(report.series.episode_returns.len(), trajs.len());
        let steps: usize = trajs.iter().map(|t| t.len()).sum();
        assert_eq!(report.series.equity.len(), steps);
    }
}

#[test]
fn flat_policy_gives_zero_report() {
    let f = fixture(2);
    let trajs = evaluate_greedy(&FlatPolicy, &f.env, &f.test).unwrap();
    let r = build_report("SYNTH", "Flat", &trajs, 1.0, 50).unwrap();
    assert_eq!((r.avg_return, r.volatility, r.max_drawdown, r.trades), (0.0, 0.0, 0.0, 0));
    assert_eq!((r.avg_pl_ratio, r.profitability_pct), (None, None));
    assert!(r.series.equity.iter().all(|e| *e == 0.0));
}

#[test]
fn training_is_reproducible_across_fixture_rebuilds() {
    let cfg = AgentConfig {
        updates: 3,
        group_size: 2,
        hidden: vec![4],
        ..AgentConfig::default()
    };
    let (a, b) = (fixture(3), fixture(3));
    for kind in [AgentKind::Qtable, AgentKind::Gspo] {
        let (_, la) = train_agent(kind, &a.env, &a.train, &cfg, 1).unwrap();
        let (_, lb) = train_agent(kind, &b.env, &b.train, &cfg, 1).unwrap();
        assert_eq!(la, lb, "{kind}");
    }
}
