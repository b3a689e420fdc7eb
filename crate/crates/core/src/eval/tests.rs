use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::benchmark::slide_windows;
use crate::features::FeatureConfig;
use crate::model::init_model;
use crate::scene::{generate_synthetic, Behavior, GeneratorConfig};

fn samples(scenarios: usize, seed: u64) -> Vec<Sample> {
    let cfg = GeneratorConfig {
        num_scenarios: scenarios,
        ..Default::default()
    };
    generate_synthetic(&cfg, seed)
        .unwrap()
        .iter()
        .flat_map(|s| slide_windows(s, 70, 20).unwrap())
        .collect()
}

fn instances(scenarios: usize, seed: u64) -> Vec<Instance> {
    build_instances(&samples(scenarios, seed), &FeatureConfig::default()).unwrap()
}

fn naive_ade(pred: &[Vec<Point>], gt: &[Vec<Point>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.iter().zip(g) {
            sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            n += 1;
        }
    }
    sum / n as f64
}

fn naive_fde(pred: &[Vec<Point>], gt: &[Vec<Point>]) -> f64 {
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (p[p.len() - 1], g[g.len() - 1]);
        sum += (a[0] - b[0]).hypot(a[1] - b[1]);
    }
    sum / pred.len() as f64
}

#[test]
fn metrics_match_reference_on_random_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let agents = rng.gen_range(1..6);
        let mut traj = || -> Vec<Vec<Point>> {
            (0..agents)
                .map(|_| {
                    (0..60)
                        .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)])
                        .collect()
                })
                .collect()
        };
        let (p, g) = (traj(), traj());
        assert!((ade(&p, &g).unwrap() - naive_ade(&p, &g)).abs() < 1e-9);
        assert!((fde(&p, &g).unwrap() - naive_fde(&p, &g)).abs() < 1e-9);
    }
}

#[test]
fn metric_examples() {
    let gt = vec![(0..60).map(|k| [k as f64, 0.0]).collect::<Vec<Point>>()];
    let shifted = vec![gt[0]
        .iter()
        .map(|p| [p[0] + 1.0, p[1]])
        .collect::<Vec<Point>>()];
    assert!((ade(&shifted, &gt).unwrap() - 1.0).abs() < 1e-12);
    assert!((fde(&shifted, &gt).unwrap() - 1.0).abs() < 1e-12);

    let zeros = vec![vec![[0.0, 0.0]; 60]];
    let mut last = zeros.clone();
    last[0][59] = [3.0, 4.0];
    assert!((fde(&last, &zeros).unwrap() - 5.0).abs() < 1e-12);
    assert!((ade(&last, &zeros).unwrap() - 5.0 / 60.0).abs() < 1e-12);

    let two = vec![vec![[0.0, 2.0]; 60]];
    assert!((ade(&two, &zeros).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn metric_shape_errors() {
    let a = vec![vec![[0.0, 0.0]; 60]];
    assert!(ade(&[], &[]).is_err());
    assert!(ade(&a, &[a[0].clone(), a[0].clone()]).is_err());
    assert!(fde(&a, &[vec![[0.0, 0.0]; 59]]).is_err());
    assert!(fde(&[vec![]], &[vec![]]).is_err());
}

fn line_history(v: Point) -> Vec<(i64, Point)> {
    (0..10)
        .map(|t| (t, [v[0] * (t - 9) as f64, v[1] * (t - 9) as f64]))
        .collect()
}

#[test]
fn constant_velocity_examples() {
    let p = cvm_predict(&line_history([0.1, 0.0]), 60).unwrap();
    assert_eq!(p.len(), 60);
    assert!((p[0][0] - 0.1).abs() < 1e-12);
    assert!((p[59][0] - 6.0).abs() < 1e-12 && p[59][1].abs() < 1e-12);

    let still = cvm_predict(&line_history([0.0, 0.0]), 60).unwrap();
    assert!(still.iter().all(|q| *q == [0.0, 0.0]));

    let single = cvm_predict(&[(9, [0.0, 0.0])], 5).unwrap();
    assert_eq!(single, vec![[0.0, 0.0]; 5]);
    assert!(cvm_predict(&[], 60).is_err());
}

#[test]
fn constant_velocity_handles_gaps() {
    let h = [(3, [-0.6, 0.3]), (5, [-0.4, 0.2]), (9, [0.0, 0.0])];
    let p = cvm_predict(&h, 2).unwrap();
    assert!((p[0][0] - 0.1).abs() < 1e-12 && (p[0][1] + 0.05).abs() < 1e-12);
    assert!((p[1][0] - 0.2).abs() < 1e-12);

    let stale = [(6, [-0.2, 0.0]), (7, [-0.1, 0.0])];
    let p = cvm_predict(&stale, 1).unwrap();
    assert!((p[0][0] - 0.2).abs() < 1e-12);
}

#[test]
fn constant_velocity_is_exact_on_constant_velocity_pedestrians() {
    let data = instances(6, 2);
    let cv: Vec<Instance> = data
        .into_iter()
        .filter(|i| i.behavior == Some(Behavior::ConstantVelocity))
        .collect();
    assert!(!cv.is_empty());
    let r = evaluate(&ConstantVelocity, &cv, Observed::Steps(10)).unwrap();
    assert!(r.ade < 1e-6, "{}", r.ade);
    assert!(r.fde < 1e-6, "{}", r.fde);
}

#[test]
fn full_evaluation_sweeps_two_to_ten() {
    let data = instances(2, 3);
    let r = evaluate(&ConstantVelocity, &data, Observed::Full).unwrap();
    assert_eq!(r.sweep.len(), 9);
    let steps: Vec<usize> = r.sweep.iter().map(|e| e.observed_steps).collect();
    assert_eq!(steps, (2..=10).collect::<Vec<_>>());
    let at_ten = evaluate(&ConstantVelocity, &data, Observed::Steps(10)).unwrap();
    assert_eq!(r.sweep[8].ade, at_ten.ade);
    assert_eq!(r.ade, at_ten.ade);
    assert_eq!(r.n_agents, data.len());
    assert!(at_ten.sweep.is_empty());

    let csv = r.sweep_csv();
    assert_eq!(csv.lines().count(), 10);
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(json["n_agents"], data.len());
    assert_eq!(json["predictor"], "cvm");
}

#[test]
fn evaluation_errors() {
    let data = instances(1, 3);
    assert!(evaluate(&ConstantVelocity, &[], Observed::Full).is_err());
    assert!(evaluate(&ConstantVelocity, &data, Observed::Steps(1)).is_err());
    assert!(evaluate(&ConstantVelocity, &data, Observed::Steps(11)).is_err());
}

#[test]
fn model_predictions_are_batch_independent() {
    let data = instances(1, 4);
    let m = init_model::<f32>(&Hyperparams::default(), 0).unwrap();
    let all = predict_all(&m, &data).unwrap();
    assert_eq!(all.len(), data.len());
    let one = Predictor::predict(&m, &[&data[0]]).unwrap();
    for (a, b) in one[0].iter().zip(&all[0]) {
        assert!((a[0] - b[0]).abs() < 1e-5 && (a[1] - b[1]).abs() < 1e-5);
    }
}

#[test]
fn grid_parsing() {
    let g = parse_grid("maps=0,50,100,200;selection=l2,risk,none").unwrap();
    assert_eq!(g.len(), 12);
    assert_eq!(
        g[0],
        AblationCell {
            map_rows: 0,
            selection: Selection::L2
        }
    );
    assert_eq!(
        g[11],
        AblationCell {
            map_rows: 200,
            selection: Selection::None
        }
    );
    assert_eq!(
        parse_grid("").unwrap(),
        vec![AblationCell {
            map_rows: 100,
            selection: Selection::L2
        }]
    );
    assert_eq!(parse_grid("selection=risk").unwrap().len(), 1);
    assert!(parse_grid("maps=x").is_err());
    assert!(parse_grid("colour=red").is_err());
    assert!(parse_grid("selection=nearest").is_err());
    assert!(parse_grid("maps").is_err());
}

#[test]
fn single_cell_ablation() {
    let s = samples(2, 6);
    let (train, rest) = s.split_at(s.len() - 4);
    let hyper = Hyperparams {
        map_rows: 50,
        ..Default::default()
    };
    let cfg = TrainConfig {
        max_epochs: 1,
        batch_size: 32,
        record_seconds: false,
        ..Default::default()
    };
    let grid = parse_grid("maps=50;selection=risk").unwrap();
    let rows = run_ablation(
        &grid,
        train,
        rest,
        rest,
        &hyper,
        &FeatureConfig::default(),
        &cfg,
    )
    .unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].report.ade.is_finite());
    let csv = ablation_csv(&rows);
    assert!(csv.starts_with("map_vectors,agent_selection,ade,fde,n_agents\n"));
    assert!(csv.lines().nth(1).unwrap().starts_with("50,risk,"));
}

#[test]
fn latency_benchmark() {
    let data = instances(1, 5);
    let m = init_model::<f32>(&Hyperparams::default(), 0).unwrap();
    assert!(latency_bench(&m, &data, &[4, 2], 0, 1).is_err());
    assert!(latency_bench(&m, &data, &[0, 2], 0, 1).is_err());
    assert!(latency_bench(&m, &data, &[], 0, 1).is_err());
    assert!(latency_bench(&m, &data, &[1], 0, 0).is_err());
    assert!(latency_bench(&m, &[], &[1], 0, 1).is_err());
    let r = latency_bench(&m, &data, &[1, 3], 1, 3).unwrap();
    assert_eq!(r.entries.len(), 2);
    for e in &r.entries {
        assert!(e.mean_ms > 0.0 && e.std_ms >= 0.0);
        assert!((e.per_agent_ms * e.batch_size as f64 - e.mean_ms).abs() < 1e-9);
    }
    assert_eq!(
        r.to_csv().lines().filter(|l| !l.starts_with('#')).count(),
        3
    );
}

#[test]
fn sweep_chart() {
    let entries: Vec<SweepEntry> = (2..=10)
        .map(|k| SweepEntry {
            observed_steps: k,
            ade: 1.0 / k as f64,
            fde: 2.0 / k as f64,
        })
        .collect();
    let svg = sweep_svg(&[
        ("stage <1>".into(), entries.clone()),
        ("stage 2".into(), entries),
    ]);
    assert!(svg.starts_with("<svg"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains("stage &lt;1&gt;"));
}
