use std::path::Path;

use octa_vq::metrics::{codebook_utilization, psnr};
use octa_vq::nets::{CodebookLevels, NetConfig};
use octa_vq::trainer::{
    collect_indices, train_stage1, train_stage2, translate, Checkpoint, LogRecord, Stage, TrainConfig, TrainOptions,
    BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE,
};
use octa_vq::volume::{
    generate_dataset, generate_phantom, read_volume, write_volume, ManifestEntry, Modality, PairManifest,
    PhantomConfig, Split, Volume,
};
use proptest::prelude::*;

fn tiny_net() -> NetConfig {
    NetConfig {
        blocks: 2,
        resblocks_per_block: 1,
        base_channels: 2,
        codebook_size: 8,
        codebook_dim: 3,
        ..Default::default()
    }
}

fn write_split(dir: &Path, seed: u64, count: usize, split: Split) -> PairManifest {
    let cfg = PhantomConfig {
        dims: [16, 16, 16],
        seed,
        ..Default::default()
    };
    std::fs::create_dir_all(dir).unwrap();
    let mut entries = Vec::new();
    for (i, p) in generate_dataset(&cfg, count).unwrap().into_iter().enumerate() {
        let (oct_path, octa_path) = (dir.join(format!("s{i}_oct.mvol")), dir.join(format!("s{i}_octa.mvol")));
        write_volume(&p.oct, &oct_path).unwrap();
        write_volume(&p.octa, &octa_path).unwrap();
        entries.push(ManifestEntry {
            oct_path,
            octa_path,
            subject_id: format!("s{i}"),
        });
    }
    let m = PairManifest::new(entries, split);
    m.write(dir.join("manifest.txt")).unwrap();
    PairManifest::read(dir.join("manifest.txt")).unwrap()
}

fn read_log(dir: &Path) -> Vec<LogRecord> {
    std::fs::read_to_string(dir.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn manifest_driven_two_stage_run() {
    let tmp = tempfile::tempdir().unwrap();
    let train = write_split(&tmp.path().join("train"), 3, 3, Split::Train);
    let val = write_split(&tmp.path().join("val"), 4, 2, Split::Val);
    assert_eq!(val.split, Split::Val);
    let val_pairs = val.load_all().unwrap();
    let net = tiny_net();

    let mut stage1 = Vec::new();
    for m in [Modality::Oct, Modality::Octa] {
        let out = tmp.path().join(format!("pre-{m}"));
        let cfg = TrainConfig {
            stage: Stage::for_modality(m).unwrap(),
            max_steps: Some(4),
            learning_rate: 1e-3,
            ..Default::default()
        };
        let opts = TrainOptions {
            out_dir: Some(&out),
            ..Default::default()
        };
        let outcome = train_stage1(&train, m, &net, &cfg, opts).unwrap();
        let on_disk = Checkpoint::load(out.join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(on_disk.to_bytes().unwrap(), outcome.checkpoint.to_bytes().unwrap());
        assert_eq!(read_log(&out), outcome.log);
        assert_eq!(outcome.log.len(), 4);
        stage1.push(on_disk);
    }

    let out = tmp.path().join("stage2");
    let cfg = TrainConfig {
        max_steps: Some(4),
        learning_rate: 1e-3,
        ..Default::default()
    };
    let opts = TrainOptions {
        out_dir: Some(&out),
        val: Some(&val_pairs),
        ..Default::default()
    };
    let outcome = train_stage2(&train, &net, &cfg, &stage1[0], &stage1[1], opts).unwrap();
    let log = read_log(&out);
    assert_eq!(log.len(), 4);
    assert!(log
        .iter()
        .all(|r| r.oct.is_some() && r.octa.is_some() && r.proj.is_some()));
    assert!(log.last().unwrap().val_psnr.is_some());

    let best = Checkpoint::load(out.join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best.stage, Stage::Stage2);
    assert!(best.heads.is_some() && best.frozen.is_some());
    let best_psnr = best.best_val_psnr.unwrap();
    let recomputed: f64 = val_pairs
        .iter()
        .map(|(o, a)| psnr(&translate(&best, o).unwrap(), a).unwrap())
        .sum::<f64>()
        / val_pairs.len() as f64;
    assert!((best_psnr - recomputed).abs() < 1e-9, "{best_psnr} vs {recomputed}");

    let model = outcome.checkpoint.model().unwrap();
    let inputs: Vec<&Volume> = val_pairs.iter().map(|p| &p.0).collect();
    let report = codebook_utilization(collect_indices(&model, &inputs).unwrap(), net.codebook_size).unwrap();
    assert_eq!(report.histogram.iter().sum::<u64>(), 2 * 4 * 4 * 4);
}

#[test]
fn written_translation_reads_back() {
    let tmp = tempfile::tempdir().unwrap();
    let train = write_split(tmp.path(), 6, 2, Split::Train);
    let net = NetConfig {
        codebook_levels: CodebookLevels::PerDownsample,
        ..tiny_net()
    };
    let cfg = |m| TrainConfig {
        stage: Stage::for_modality(m).unwrap(),
        max_steps: Some(2),
        ..Default::default()
    };
    let oct = train_stage1(
        &train,
        Modality::Oct,
        &net,
        &cfg(Modality::Oct),
        TrainOptions::default(),
    )
    .unwrap();
    let octa = train_stage1(
        &train,
        Modality::Octa,
        &net,
        &cfg(Modality::Octa),
        TrainOptions::default(),
    )
    .unwrap();
    let s2 = TrainConfig {
        max_steps: Some(2),
        ..Default::default()
    };
    let ck = train_stage2(
        &train,
        &net,
        &s2,
        &oct.checkpoint,
        &octa.checkpoint,
        TrainOptions::default(),
    )
    .unwrap()
    .checkpoint;
    let (src, _) = train.load_pair(0).unwrap();
    let y = translate(&ck, &src).unwrap();
    let path = tmp.path().join("pred.mvol");
    write_volume(&y, &path).unwrap();
    assert_eq!(read_volume(&path).unwrap(), y);
    assert_eq!(y.modality(), Modality::Oct2Octa);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn translations_keep_dims_and_unit_range(seed in 0u64..1000, scale in 0.0f32..1.0) {
        let net = octa_vq::nets::VqVae::new(tiny_net(), seed).unwrap();
        let p = generate_phantom(&PhantomConfig { dims: [16, 8, 12], seed, ..Default::default() }).unwrap();
        let x = p.oct.scaled(scale).unwrap();
        let y = octa_vq::trainer::translate_with(&net, &x, None).unwrap();
        prop_assert_eq!(y.dims(), x.dims());
        prop_assert!(y.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn phantoms_are_seed_deterministic(seed in 0u64..10_000, l in 1usize..5, w in 1usize..5, d in 1usize..5) {
        let cfg = PhantomConfig { dims: [8 * l, 8 * w, 8 * d], seed, ..Default::default() };
        let a = generate_phantom(&cfg).unwrap();
        let b = generate_phantom(&cfg).unwrap();
        prop_assert_eq!(&a.oct, &b.oct);
        prop_assert_eq!(&a.octa, &b.octa);
        prop_assert_eq!(a.oct.dims(), a.octa.dims());
        for v in a.oct.values().iter().chain(a.octa.values()) {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }
}
