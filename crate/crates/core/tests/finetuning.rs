use candle_core::DType;
use pcus::backbones::{build_backbone, Backbone, BackboneConfig, Variant};
use pcus::data::{extract_patches, synth_generate, Matrix, RoiPatch, SynthConfig, RoiParams, TextureParams};
use pcus::finetune::{
    finetune_step, predict_roi, train_head_with_validation, FeatureSet, HeadConfig, HeadModel,
};
use pcus::training::{Schedule, Trainer};
use pcus::vicreg::{pretrain, AugmentationPolicy, ProjectorConfig, VicregWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn encoder_config() -> BackboneConfig {
    let mut c = BackboneConfig::desk(Variant::Resnet18Slim);
    c.feature_dim = 64;
    c.resnet.stem_stride = 4;
    c
}

fn patches(seed: u64, patients: usize) -> Vec<Vec<RoiPatch>> {
    let cfg = SynthConfig {
        n_patients: patients,
        cores_per_patient: 1,
        cancer_core_rate: 0.5,
        involvement_range: (0.3, 0.7),
        benign_texture: TextureParams {
            spectral_slope: 1.0,
            std: 1.0,
            speckle_scale: 2.0,
        },
        cancer_texture: TextureParams {
            spectral_slope: 3.0,
            std: 1.3,
            speckle_scale: 10.0,
        },
        seed,
        ..SynthConfig::default()
    };
    synth_generate(&cfg)
        .unwrap()
        .cores
        .iter()
        .map(|c| extract_patches(c, &RoiParams::default()).unwrap())
        .collect()
}

fn features(encoder: &Backbone, cores: &[Vec<RoiPatch>]) -> FeatureSet {
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for core in cores {
        let refs: Vec<&Matrix> = core.iter().map(|p| &p.pixels).collect();
        values.extend(encoder.encode_patches(&refs, 16).unwrap());
        labels.extend(core.iter().map(|p| p.weak_label));
    }
    FeatureSet::new(encoder.feature_dim(), values, labels).unwrap()
}

/// First step whose validation loss is below `threshold`.
fn steps_to(history: &[pcus::training::StepLog], threshold: f64) -> usize {
    history
        .iter()
        .position(|s| s.loss.component("validation").unwrap() < threshold)
        .unwrap_or(usize::MAX)
}

fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[v.len() / 2]
}

#[test]
fn ssl_initialization_reaches_validation_threshold_sooner() {
    let head_schedule = Schedule {
        steps: 200,
        batch_size: 64,
        learning_rate: 1e-3,
        weight_decay: 0.0,
        warmup: 0,
    };
    let ssl_schedule = Schedule {
        steps: 60,
        batch_size: 8,
        learning_rate: 1e-3,
        weight_decay: 1e-4,
        warmup: 0,
    };
    let threshold = 0.6;
    let mut ssl_steps = Vec::new();
    let mut random_steps = Vec::new();
    for seed in 0..3u64 {
        let cores = patches(100 + seed, 12);
        let (train, val) = cores.split_at(8);
        let images: Vec<Matrix> = train.iter().flatten().map(|p| p.pixels.clone()).collect();

        let random = build_backbone(&encoder_config(), seed).unwrap();
        let ssl = build_backbone(&encoder_config(), seed).unwrap();
        pretrain(
            &ssl,
            &ProjectorConfig { hidden: 128, output: 128 },
            &images,
            &AugmentationPolicy::default(),
            &VicregWeights::default(),
            &ssl_schedule,
            seed,
        )
        .unwrap();

        for (encoder, out) in [(&ssl, &mut ssl_steps), (&random, &mut random_steps)] {
            let head = HeadModel::new(64, &HeadConfig::default(), seed, DType::F32).unwrap();
            let h = train_head_with_validation(
                &head,
                &features(encoder, train),
                Some(&features(encoder, val)),
                &head_schedule,
                seed,
            )
            .unwrap();
            out.push(steps_to(&h, threshold));
        }
    }
    assert!(
        median(ssl_steps.clone()) < median(random_steps.clone()),
        "ssl {ssl_steps:?} vs random {random_steps:?}"
    );
}

#[test]
fn loss_falls_during_first_epoch_on_separable_features() {
    let mut falls = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 512;
        let dim = 16;
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let values: Vec<f32> = labels
            .iter()
            .flat_map(|&l| {
                let sign = if l == 1 { 1.0 } else { -1.0 };
                (0..dim).map(|_| sign * 0.3 + rng.random::<f32>() - 0.5).collect::<Vec<_>>()
            })
            .collect::<Vec<_>>();
        let set = FeatureSet::new(dim, values, labels).unwrap();
        let head = HeadModel::new(dim, &HeadConfig::default(), seed, DType::F32).unwrap();
        // one epoch: n / batch steps
        let schedule = Schedule {
            steps: 16,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            warmup: 0,
        };
        let h = train_head_with_validation(&head, &set, None, &schedule, seed).unwrap();
        falls.push(h[0].loss.total - h[15].loss.total);
    }
    falls.sort_by(f64::total_cmp);
    assert!(falls[2] > 0.0, "{falls:?}");
}

#[test]
fn full_finetuning_overfits_eight_patches() {
    let cores = patches(7, 2);
    let mut batch: Vec<&RoiPatch> = Vec::new();
    for core in &cores {
        batch.extend(core.iter().take(4));
    }
    let labels: Vec<u8> = batch.iter().map(|p| p.weak_label).collect();
    assert!(labels.contains(&0) && labels.contains(&1));
    let pixels: Vec<&Matrix> = batch.iter().map(|p| &p.pixels).collect();

    let encoder = build_backbone(&encoder_config(), 0).unwrap();
    let head = HeadModel::new(64, &HeadConfig::default(), 0, DType::F32).unwrap();
    let schedule = Schedule {
        steps: 200,
        batch_size: 8,
        learning_rate: 1e-3,
        weight_decay: 0.0,
        warmup: 0,
    };
    let mut vars = encoder.params().trainable();
    vars.extend(head.store.trainable());
    let mut trainer = Trainer::new(vars, &schedule).unwrap();
    let mut last = f64::INFINITY;
    for step in 0..schedule.steps {
        last = finetune_step(&encoder, &head.head, &mut trainer, &pixels, &labels, step)
            .unwrap()
            .total;
    }
    assert!(last < 0.01, "final training CE {last}");
    let probs = predict_roi(&encoder, &head.head, &pixels).unwrap();
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(finetune_step(&encoder, &head.head, &mut trainer, &pixels, &labels[..3], 0).is_err());
}
