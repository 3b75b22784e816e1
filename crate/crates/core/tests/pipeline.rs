use hpl_core::dataset::{DataConfig, Dataset};
use hpl_core::labeling::{FileRecon, OracleRecon, ReconChannelConfig, ReconRequest, ReconstructionChannel};
use hpl_core::segnet::{forward, init_params, SegNetConfig};
use hpl_core::trainer::{TrainConfig, Trainer};
use hpl_core::{SegNetParams, SegNetParams32, Tensor, Tensor32};

fn small() -> DataConfig {
    DataConfig {
        width: 16,
        height: 16,
        num_classes: 3,
        num_grids: 2,
        events_per_grid: 100,
        source_samples: 6,
        target_samples: 8,
        target_eval_samples: 2,
        seed: 11,
        ..DataConfig::default()
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        warmup_iters: 3,
        total_iters: 4,
        eval_interval: 2,
        lr: 5e-3,
        proportion: 0.25,
        ..TrainConfig::default()
    }
}

#[test]
fn saved_dataset_trains_like_the_generated_one() {
    let data = Dataset::generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let recon_cfg = ReconChannelConfig::default();
    data.save(dir.path(), &recon_cfg).unwrap();
    let loaded = Dataset::load(dir.path()).unwrap();
    assert_eq!(loaded.config, data.config);
    assert_eq!(loaded.target.len(), data.target.len());

    let model = SegNetConfig::new(2, 4, 3, 1);
    let recon = OracleRecon { config: recon_cfg };
    let a = Trainer::new(&train_cfg(), &data, &recon).unwrap().run(&model).unwrap();
    let b = Trainer::new(&train_cfg(), &loaded, &recon).unwrap().run(&model).unwrap();
    assert_eq!(a.history, b.history);
}

#[test]
fn sidecar_reconstructions_match_the_oracle_up_to_quantization() {
    let data = Dataset::generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ReconChannelConfig::default();
    data.save(dir.path(), &cfg).unwrap();
    let oracle = OracleRecon { config: cfg };
    let file = FileRecon {
        dir: dir.path().join("recon"),
    };
    for t in &data.target {
        let req = || ReconRequest {
            id: &t.id,
            scene: Some((&t.scene, t.step)),
        };
        let a = oracle.reconstruct(req()).unwrap();
        let b = file.reconstruct(req()).unwrap();
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "{} off by {worst}", t.id);
    }
}

#[test]
fn single_precision_forward_tracks_double() {
    let cfg = SegNetConfig::new(2, 4, 3, 2);
    let p: SegNetParams = init_params(&cfg).unwrap();
    let p32: SegNetParams32 = p.cast();
    let x: Tensor = Tensor::from_vec(&[2, 6, 6], (0..72).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect()).unwrap();
    let x32: Tensor32 = x.cast();
    let a = forward(&p, &x).unwrap();
    let b = forward(&p32, &x32).unwrap();
    for (u, v) in a.logits.data().iter().zip(b.logits.data()) {
        assert!((u - f64::from(*v)).abs() < 1e-4);
    }
}
