mod common;

use cdhm::eval::{evaluate, predict, run_ablation, run_snr_sweep, run_transfer, AblationVariant, DataSpec, ExperimentConfig};
use cdhm::model::{Architecture, BatchInput, Network};
use cdhm::signal::{synth_dataset, Domain};
use cdhm::train::{TermMask, TrainConfig};
use common::{micro_data, micro_domain, micro_model, micro_pipeline};

fn micro_experiment(classes: usize, shifted: bool) -> ExperimentConfig {
    let target = if shifted {
        micro_domain(Domain::Target, classes, 1)
    } else {
        cdhm::signal::SyntheticDomainConfig {
            name: "A'".into(),
            seed: 1,
            ..micro_domain(Domain::Source, classes, 0)
        }
    };
    ExperimentConfig {
        data: DataSpec::Synthetic {
            source: micro_domain(Domain::Source, classes, 0),
            target,
            per_class: 12,
        },
        pipeline: micro_pipeline(),
        model: micro_model(classes),
        train: TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        },
        seeds: vec![0, 1, 2],
        ..ExperimentConfig::default()
    }
}

#[test]
fn uniform_predictor_scores_near_chance() {
    let (_, tgt) = micro_data(4, 100, 3);
    assert_eq!(tgt.len(), 400);
    let mut net = Network::new(Architecture::Base, micro_model(4), 0).unwrap();
    net.store_mut().zero_trainable();
    let ev = evaluate(&net, &tgt).unwrap();
    assert!((15.0..=35.0).contains(&ev.accuracy), "{}", ev.accuracy);
    assert_eq!(ev.confusion.row_sums(), vec![100; 4]);
    assert_eq!(ev.confusion.total(), 400);
}

#[test]
fn evaluate_uses_deterministic_posterior_means() {
    let (src, _) = micro_data(3, 5, 0);
    let net = Network::new(Architecture::Cdhm, micro_model(3), 9).unwrap();
    let a = evaluate(&net, &src).unwrap();
    let b = evaluate(&net, &src).unwrap();
    assert_eq!(a, b);
    let items: Vec<_> = src.iter().collect();
    let probs = net.predict(&BatchInput::new(&items).unwrap()).unwrap();
    let argmax: Vec<usize> = probs
        .rows()
        .iter()
        .map(|r| (0..r.len()).fold(0, |b, i| if r[i] > r[b] { i } else { b }))
        .collect();
    assert_eq!(predict(&net, &src).unwrap(), argmax);
    let truth: Vec<usize> = src.iter().map(|s| s.label().unwrap()).collect();
    let correct = truth.iter().zip(&argmax).filter(|(a, b)| a == b).count();
    assert!((a.accuracy - 100.0 * correct as f64 / truth.len() as f64).abs() < 1e-12);
    assert_eq!(a.confusion.row_sums(), vec![5; 3]);
}

#[test]
fn in_domain_accuracy_is_at_least_cross_domain_for_base() {
    let same = run_transfer(&micro_experiment(2, false), AblationVariant::L1, None, false).unwrap();
    let cross = run_transfer(&micro_experiment(2, true), AblationVariant::L1, None, false).unwrap();
    assert!(same.mean_accuracy >= cross.mean_accuracy, "A→A {} A→B {}", same.mean_accuracy, cross.mean_accuracy);
}

#[test]
fn transfer_report_echoes_task_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_experiment(2, true);
    cfg.task_id = Some("A→B micro".into());
    cfg.seeds = vec![4, 5];
    cfg.train.epochs = 1;
    cfg.reference_accuracy = Some(99.73);
    let r = run_transfer(&cfg, AblationVariant::L, Some(dir.path()), true).unwrap();
    assert_eq!(r.task_id, "A→B micro");
    assert_eq!(r.repeats, 2);
    assert_eq!(r.seeds, vec![4, 5]);
    assert_eq!(r.reference_accuracy, Some(99.73));
    assert_eq!(r.runs.len(), 2);
    assert_eq!(r.confusion.total(), r.runs.iter().map(|x| x.confusion.total()).sum::<u64>());
    for f in ["report.json", "confusion.csv", "confusion.svg", "seed4/history.jsonl", "seed5/final.safetensors", "seed4/loss.svg"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back: cdhm::eval::ExperimentReport =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back.task_id, r.task_id);
}

#[test]
fn ablation_shares_data_and_batches() {
    let mut cfg = micro_experiment(2, true);
    cfg.seeds = vec![0];
    cfg.train.epochs = 1;
    let reports = run_ablation(&cfg, None, false).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["L1", "L2", "L3", "L"]);
    let hashes: Vec<&String> = reports.iter().map(|r| &r.runs[0].first_batch_hash).collect();
    assert!(hashes.iter().all(|h| *h == hashes[0]));
    let totals: Vec<u64> = reports.iter().map(|r| r.confusion.total()).collect();
    assert!(totals.iter().all(|&t| t == totals[0]));
    let refs: Vec<f64> = reports.iter().map(|r| r.reference_accuracy.unwrap()).collect();
    assert_eq!(refs, [68.75, 78.68, 76.89, 89.65]);
    assert_eq!(reports[3].reference_ranking.as_deref().unwrap(), ["L1", "L3", "L2", "L"]);
}

#[test]
fn full_loss_without_transfer_terms_matches_elbo_variant() {
    let l3 = AblationVariant::L3.terms();
    let l = AblationVariant::L.terms();
    assert_eq!(l3, TermMask { mmd: false, dis: false, ..l });

    let (src, tgt) = micro_data(2, 6, 2);
    let base = TrainConfig {
        epochs: 1,
        batch_size: 4,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let run = |terms: TermMask, alpha: f64, beta: f64| {
        let mut cfg = TrainConfig { terms, ..base.clone() };
        cfg.weights.alpha = alpha;
        cfg.weights.beta = beta;
        let net = Network::new(Architecture::Cdhm, micro_model(2), 0).unwrap();
        let mut t = cdhm::train::Trainer::new(net, cfg).unwrap();
        let h = t.fit(&src, &tgt, None).unwrap();
        let losses: Vec<[u64; 4]> = h
            .iter()
            .map(|r| [r.loss.total.to_bits(), r.loss.cls.to_bits(), r.loss.elbo_recon.to_bits(), r.loss.elbo_kl.to_bits()])
            .collect();
        let params: Vec<u64> = t
            .net
            .store()
            .entries()
            .filter(|(_, e)| !e.name.starts_with("discriminator"))
            .flat_map(|(_, e)| e.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        (losses, params)
    };
    assert_eq!(run(l, 0.0, 0.0), run(l3, 0.5, 0.2));
}

#[test]
fn snr_sweep_shapes_and_clean_limit() {
    let mut cfg = micro_experiment(2, false);
    cfg.seeds = vec![0];
    cfg.train.epochs = 2;
    cfg.snr_db = vec![f64::INFINITY, 0.0, -2.0];
    cfg.snr_compare_base = true;
    let r = run_snr_sweep(&cfg, None, false).unwrap();
    assert_eq!(r.series.len(), 2);
    for s in &r.series {
        assert_eq!(s.mean_accuracy.len(), 3);
        assert_eq!(s.accuracy[0].len(), 3);
        assert_eq!(s.accuracy[0][0], s.clean_accuracy[0]);
    }
    assert_eq!(ExperimentConfig::default().snr_db, vec![-2.0, 0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
}

#[test]
fn snr_sweep_writes_series_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_experiment(2, false);
    cfg.seeds = vec![1];
    cfg.train.epochs = 1;
    cfg.snr_db = vec![0.0, 6.0];
    let r = run_snr_sweep(&cfg, Some(dir.path()), true).unwrap();
    assert_eq!(r.series.len(), 1);
    assert_eq!(r.series[0].variant, "L");
    for f in ["report.json", "snr_L.csv", "snr.svg"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn manifest_data_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let src = synth_dataset(&micro_domain(Domain::Source, 2, 0), 6).unwrap();
    let tgt = synth_dataset(&micro_domain(Domain::Target, 2, 1), 6).unwrap();
    let ms = cdhm::signal::io::write_dataset(&dir.path().join("src"), &src).unwrap();
    let mt = cdhm::signal::io::write_dataset(&dir.path().join("tgt"), &tgt).unwrap();
    let mut cfg = micro_experiment(2, true);
    cfg.data = DataSpec::Manifest { source: ms, target: mt };
    cfg.seeds = vec![0];
    cfg.train.epochs = 1;
    let r = run_transfer(&cfg, AblationVariant::L1, None, false).unwrap();
    assert_eq!(r.task_id, "src→tgt");
    assert_eq!(r.confusion.total(), 4);
}
