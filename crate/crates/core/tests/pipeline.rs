mod common;

use std::fs;
use std::path::Path;

use common::toy_config;
use mtnlu::bpe::UNK_ID;
use mtnlu::checkpoint::Checkpoint;
use mtnlu::corpus::read_lines;
use mtnlu::pipeline::{self, CheckpointMeta, PipelineError};
use mtnlu::trainer::Role;

fn prepare_data(dir: &Path, seed: u64) -> mtnlu::config::ExperimentConfig {
    let cfg = toy_config(dir, seed, &[]);
    pipeline::generate(&cfg).unwrap();
    pipeline::learn_bpe_from_config(&cfg).unwrap();
    cfg
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn synthetic_valid_and_test_tokens_are_in_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepare_data(dir.path(), 3);
    let prep = pipeline::prepare(&cfg).unwrap();
    let synth = cfg.synthetic_task().unwrap();
    let tgt_vocab = &prep.tgt_vocabs[&synth.id];
    let mut checked = 0;
    for (src, tgt) in [(&synth.valid_src, &synth.valid_tgt), (&synth.test_src, &synth.test_tgt)] {
        for line in read_lines(src.as_ref().unwrap()).unwrap() {
            let ids = prep.src_vocab.encode(&prep.segmenter.segment(&line));
            assert!(!ids.contains(&UNK_ID), "source {line:?} has an unknown subword");
            checked += 1;
        }
        for line in read_lines(tgt.as_ref().unwrap()).unwrap() {
            let ids = tgt_vocab.encode(&prep.segmenter.segment(&line));
            assert!(!ids.contains(&UNK_ID), "target {line:?} has an unknown subword");
        }
    }
    assert_eq!(checked, 44);
}

#[test]
fn generation_is_deterministic_and_manifest_matches_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = pipeline::generate(&toy_config(a.path(), 7, &[])).unwrap();
    pipeline::generate(&toy_config(b.path(), 7, &[])).unwrap();
    assert_eq!(files(&a.path().join("data")), files(&b.path().join("data")));
    let src = fs::read_to_string(a.path().join("data/synth.src")).unwrap();
    let tgt = fs::read_to_string(a.path().join("data/synth.tgt")).unwrap();
    assert_eq!(src.lines().count(), m.pair_count);
    assert_eq!(tgt.lines().count(), m.pair_count);
    let manifest = fs::read_to_string(a.path().join("data/synth.manifest")).unwrap();
    assert!(manifest.contains(&format!("pairs: {}", m.pair_count)));
}

#[test]
fn training_twice_gives_identical_artifacts() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = prepare_data(dir.path(), 11);
            pipeline::train(&cfg, None).unwrap();
            let out = files(&cfg.out_dir);
            (dir, out)
        })
        .collect();
    let names: Vec<&str> = runs[0].1.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["best.ckpt", "epoch-1.ckpt", "epoch-2.ckpt", "metrics.log"]);
    assert_eq!(runs[0].1, runs[1].1);
    let log = String::from_utf8(runs[0].1[3].1.clone()).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.contains("ppl.atis=") && l.contains("ppl.para=") && l.contains("val_f1=")));
}

#[test]
fn finetune_keeps_other_heads_and_restarts_adam() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepare_data(dir.path(), 5);
    pipeline::train(&cfg, None).unwrap();
    let joint = Checkpoint::load(&cfg.out_dir.join("best.ckpt")).unwrap();
    let joint_meta = CheckpointMeta::parse(&joint.metadata).unwrap();
    assert!(joint_meta.adam_steps > 0);

    let ft_cfg = toy_config(dir.path(), 5, &["trainer.finetune_epochs=2", "out_dir=\"ft\""]);
    let summary = pipeline::train(&ft_cfg, Some(&cfg.out_dir.join("best.ckpt"))).unwrap();
    assert_eq!(summary.phases.len(), 1);

    let log = fs::read_to_string(ft_cfg.out_dir.join("metrics.log")).unwrap();
    assert!(log.lines().next().unwrap().starts_with("adam_reset phase=finetune adam_steps=0"));

    let first = Checkpoint::load(&ft_cfg.out_dir.join("finetune-1.ckpt")).unwrap();
    let meta = CheckpointMeta::parse(&first.metadata).unwrap();
    assert_eq!(meta.phase, "finetune");
    assert_eq!(meta.adam_steps_at_phase_start, 0);
    // One epoch of the synthetic task alone: ceil(groups / t) steps from zero.
    let steps_one_epoch = meta.adam_steps;
    let last = Checkpoint::load(&ft_cfg.out_dir.join("finetune-2.ckpt")).unwrap();
    assert_eq!(CheckpointMeta::parse(&last.metadata).unwrap().adam_steps, 2 * steps_one_epoch);

    let ood: Vec<&str> = meta.tasks.iter().filter(|t| t.role == Role::OutOfDomain).map(|t| t.id.as_str()).collect();
    assert_eq!(ood, ["para"]);
    let mut compared = 0;
    let mut synth_changed = false;
    for ((name, before), (name2, after)) in joint.tensors.iter().zip(&last.tensors) {
        assert_eq!(name, name2);
        let bits = |t: &mtnlu::tensor::Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if name.starts_with("head.para.") {
            assert_eq!(bits(before), bits(after), "{name} changed during fine-tuning");
            compared += 1;
        } else if name.starts_with("head.atis.") && bits(before) != bits(after) {
            synth_changed = true;
        }
    }
    assert!(compared >= 6);
    assert!(synth_changed);
}

#[test]
fn missing_placeholder_is_an_input_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("table.txt");
    fs::write(&table, "fromloc\n  boston\n  denver\ntoloc\n  dallas\n").unwrap();
    let cfg = toy_config(dir.path(), 1, &[&format!("generate.table=\"{}\"", table.display())]);
    let err = pipeline::generate(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("placeholder day missing"), "{err}");
}

#[test]
fn decode_rejects_unknown_task_and_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepare_data(dir.path(), 2);
    pipeline::train(&cfg, Some(Path::new("/nonexistent.ckpt"))).unwrap_err();
    pipeline::train(&cfg, None).unwrap();
    let ck = cfg.out_dir.join("best.ckpt");
    let src = cfg.synthetic_task().unwrap().test_src.clone().unwrap();
    let out = dir.path().join("hyp");
    let hyps = pipeline::decode(&ck, None, &src, &out, None).unwrap();
    assert_eq!(hyps.len(), read_lines(&src).unwrap().len());
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), hyps.len());
    let e = pipeline::decode(&ck, Some("nope"), &src, &out, None).unwrap_err();
    assert!(matches!(e, PipelineError::Input(_)));
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, &fs::read(&ck).unwrap()[..100]).unwrap();
    assert_eq!(pipeline::decode(&bad, None, &src, &out, None).unwrap_err().exit_code(), 2);
}
