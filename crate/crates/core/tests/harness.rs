use cmsa_vqa::data::{generate_synthetic, Split, SplitCounts, SyntheticCorpus};
use cmsa_vqa::harness::{
    self, build_vqa, evaluate_predictor, evaluate_vqa, load_checkpoint, parse_csv, pretrain_encoder, save_checkpoint,
    to_csv, train_vqa, vqa_from_checkpoint, RunConfig, ENCODER_PREFIX,
};
use cmsa_vqa::image::ImageType;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.model.channels = [3, 4, 5];
    cfg.model.stem_channels = 2;
    cfg.model.emb_half = 3;
    cfg.model.d_q = 6;
    cfg.model.task_hidden = 4;
    cfg.steps = 6;
    cfg.batch_size = 4;
    cfg.pretrain_steps = 5;
    cfg.pretrain_batch_size = 4;
    cfg.eval_every = 3;
    cfg.synth.vqa = SplitCounts { train: 12, val: 6, test: 10 };
    cfg.synth.pretrain = SplitCounts { train: 6, val: 2, test: 4 };
    cfg
}

fn corpus(cfg: &RunConfig) -> SyntheticCorpus {
    generate_synthetic(cfg.seed, &cfg.synth).unwrap()
}

#[test]
fn zero_learning_rate_pretraining_logs_constant_losses() {
    let mut cfg = tiny();
    cfg.adam.lr = 0.0;
    cfg.pretrain_batch_size = cfg.synth.pretrain.train;
    let c = corpus(&cfg);
    for t in ImageType::ALL {
        let run = pretrain_encoder(&cfg, &c, t).unwrap();
        let first = &run.rows[0];
        for row in &run.rows {
            assert_eq!(row.l_spe.map(f64::to_bits), first.l_spe.map(f64::to_bits), "{t:?}");
            assert_eq!(row.l_com.map(f64::to_bits), first.l_com.map(f64::to_bits), "{t:?}");
            assert_eq!(row.total.to_bits(), first.total.to_bits());
        }
    }
}

#[test]
fn logged_totals_compose_exactly() {
    let cfg = tiny();
    let c = corpus(&cfg);
    for multitask in [true, false] {
        let mut cfg = cfg.clone();
        cfg.pretrain_multitask = multitask;
        let run = pretrain_encoder(&cfg, &c, ImageType::Abdomen).unwrap();
        for row in &run.rows {
            let expect = match row.l_com {
                Some(com) => row.l_spe.unwrap() + com,
                None => row.l_spe.unwrap(),
            };
            assert_eq!(row.total.to_bits(), expect.to_bits());
            assert_eq!(row.l_com.is_some(), multitask);
        }
    }
    let run = train_vqa(&cfg, &c, &[]).unwrap();
    for row in &run.rows {
        assert_eq!(row.total.to_bits(), (row.l_vqa.unwrap() + 0.5 * row.l_type.unwrap()).to_bits());
    }
}

#[test]
fn metrics_rows_are_complete_and_increasing() {
    let cfg = tiny();
    let run = train_vqa(&cfg, &corpus(&cfg), &[]).unwrap();
    let rows = parse_csv(&to_csv(&run.rows)).unwrap();
    let steps: Vec<usize> = rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=cfg.steps).collect::<Vec<_>>());
}

#[test]
fn transferred_encoders_are_bit_identical_before_the_first_update() {
    let cfg = tiny();
    let c = corpus(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut sources = Vec::new();
    for t in ImageType::ALL {
        let run = pretrain_encoder(&cfg, &c, t).unwrap();
        let path = dir.path().join(format!("{}.cmtb", t.name()));
        save_checkpoint(&path, &run.store, &cfg, cfg.pretrain_steps).unwrap();
        sources.push(load_checkpoint(&path).unwrap().store);
    }
    let (_, fresh) = build_vqa(&cfg, c.vocab.len(), &[]).unwrap();
    let (_, store) = build_vqa(&cfg, c.vocab.len(), &sources).unwrap();
    for (t, src) in ImageType::ALL.iter().zip(&sources) {
        let prefix = format!("enc.{}.", t.name());
        assert!(store.prefix_bit_eq(src, &prefix), "{prefix}");
        assert!(!store.prefix_bit_eq(&fresh, &prefix), "{prefix} was not replaced");
    }
    // Parameters outside the encoders keep their fresh initialisation.
    for (name, tensor) in store.iter().filter(|(n, _)| !n.starts_with(ENCODER_PREFIX)) {
        assert!(tensor.bit_eq(fresh.get(name).unwrap()), "{name}");
    }
}

#[test]
fn shape_mismatched_checkpoint_is_rejected() {
    let cfg = tiny();
    let c = corpus(&cfg);
    let mut other = cfg.clone();
    other.model.channels = [3, 4, 6];
    let run = pretrain_encoder(&other, &c, ImageType::Head).unwrap();
    assert!(build_vqa(&cfg, c.vocab.len(), &[run.store]).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let cfg = tiny();
    let c = corpus(&cfg);
    let run = train_vqa(&cfg, &c, &[]).unwrap();
    let test = c.vqa_split(Split::Test);
    let before = evaluate_vqa(&run.model, &run.store, &test, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vqa.cmtb");
    save_checkpoint(&path, &run.store, &cfg, run.selected_step).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    assert_eq!(ckpt.step, run.selected_step);
    assert_eq!(ckpt.config, cfg);
    let model = vqa_from_checkpoint(&ckpt, c.vocab.len()).unwrap();
    let after = evaluate_vqa(&model, &ckpt.store, &test, 1).unwrap();
    assert_eq!(before, after);
    assert_eq!(before.all_acc.to_bits(), after.all_acc.to_bits());
}

#[test]
fn evaluation_is_repeatable_and_thread_independent() {
    let cfg = tiny();
    let c = corpus(&cfg);
    let run = train_vqa(&cfg, &c, &[]).unwrap();
    let test = c.vqa_split(Split::Test);
    let a = evaluate_vqa(&run.model, &run.store, &test, 1).unwrap();
    let b = evaluate_vqa(&run.model, &run.store, &test, 1).unwrap();
    let d = evaluate_vqa(&run.model, &run.store, &test, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, d);
    assert_eq!(a.n_open + a.n_closed, test.len());
}

#[test]
fn majority_predictor_scores_the_majority_frequency() {
    let cfg = tiny();
    let c = corpus(&cfg);
    for split in Split::ALL {
        let samples = c.vqa_split(split);
        let mut counts = [0usize; 5];
        samples.iter().for_each(|s| counts[s.answer_id] += 1);
        let (majority, &freq) = counts.iter().enumerate().max_by_key(|(i, &n)| (n, std::cmp::Reverse(*i))).unwrap();
        let m = evaluate_predictor(&samples, 2, |_| Ok((majority, 0))).unwrap();
        assert_eq!(m.all_acc, freq as f64 / samples.len() as f64);
        assert_eq!(m.n_open + m.n_closed, samples.len());
        let weighted = (m.open_acc * m.n_open as f64 + m.closed_acc * m.n_closed as f64) / samples.len() as f64;
        assert!((weighted - m.all_acc).abs() < 1e-12);
    }
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.data_dir = dir.path().join("data");
    harness::run_gen_data(&cfg).unwrap();
    let mut csv = Vec::new();
    for arm in ["a", "b"] {
        cfg.out_dir = dir.path().join(arm);
        harness::run_pretrain(&cfg).unwrap();
        harness::run_vqa_train(&cfg, Some(&cfg.out_dir.clone())).unwrap();
        let read = |f: &str| String::from_utf8(std::fs::read(cfg.out_dir.join(f)).unwrap()).unwrap();
        let params = load_checkpoint(&cfg.out_dir.join("vqa.cmtb")).unwrap().store;
        csv.push((read("pretrain_abdomen.csv"), read("vqa.csv"), params));
    }
    assert_eq!(csv[0].0, csv[1].0);
    assert_eq!(csv[0].1, csv[1].1);
    assert!(csv[0].2.prefix_bit_eq(&csv[1].2, ""));
    let mut other = cfg.clone();
    other.seed += 1;
    other.out_dir = dir.path().join("c");
    harness::run_vqa_train(&other, None).unwrap();
    assert_ne!(std::fs::read_to_string(other.out_dir.join("vqa.csv")).unwrap(), csv[0].1);
}

#[test]
fn eval_reports_missing_split_and_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.data_dir = dir.path().join("data");
    cfg.out_dir = dir.path().join("out");
    harness::run_gen_data(&cfg).unwrap();
    harness::run_vqa_train(&cfg, None).unwrap();
    let ckpt = cfg.out_dir.join("vqa.cmtb");
    let m = harness::run_eval(&ckpt, &cfg.data_dir, "val", 1).unwrap();
    assert_eq!(m.n_open + m.n_closed, cfg.synth.vqa.val);
    assert!(harness::run_eval(&ckpt, &cfg.data_dir, "dev", 1).is_err());
    assert!(harness::run_eval(&ckpt, &dir.path().join("nowhere"), "test", 1).is_err());
    assert!(harness::run_pretrain(&RunConfig {
        data_dir: dir.path().join("nowhere"),
        ..cfg.clone()
    })
    .is_err());
}

#[test]
fn gradcheck_passes_for_one_and_two_glimpses() {
    for glimpses in [1, 2] {
        let mut cfg = tiny();
        cfg.model.glimpses = glimpses;
        let report = harness::run_gradcheck(&cfg, None).unwrap();
        let worst = report.worst().unwrap();
        assert!(report.passed(), "glimpses {glimpses}: {} {:.3e}", worst.name, worst.worst_rel_err);
        assert!(report.params.iter().all(|p| p.checked > 0), "every parameter checked");
    }
}

#[test]
fn corrupted_gradient_fails_and_is_named() {
    let cfg = tiny();
    let target = "answer.fc1.w".to_string();
    let report = harness::run_gradcheck(&cfg, Some(target.clone())).unwrap();
    assert!(!report.passed());
    let failing: Vec<&str> = report.failing().map(|p| p.name.as_str()).collect();
    assert_eq!(failing, [target.as_str()]);
    assert_eq!(report.worst().unwrap().name, target);
}

#[test]
fn training_keeps_attention_rows_and_gate_normalised() {
    let cfg = tiny();
    let run = train_vqa(&cfg, &corpus(&cfg), &[]).unwrap();
    assert!(run.diagnostics.gate_deviation <= 1e-9);
    assert!(run.diagnostics.attention_deviation <= 1e-9);
}
