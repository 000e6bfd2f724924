use image::RgbImage;

use cellprompt::data::synth::synth_samples;
use cellprompt::data::{sliding_window_infer, synth_generate, Manifest, SynthSpec};
use cellprompt::train::{evaluate_checkpoint, evaluate_samples, load_checkpoint, save_checkpoint, train, RunConfig};
use cellprompt::{CategoryRegistry, DatasetDescriptor, ErrorKind};

const TINY: &str = r#"
seed = 3
iterations = 2
log_every = 1
threshold = 0.0
[model]
dim = 16
heads = 2
ffn_dim = 32
num_queries = 20
backbone_channels = [4, 8, 8, 16]
[dpm]
context_tokens = 2
seq_len = 8
[augment]
sizes = [64]
[slice]
patch_size = 64
"#;

fn tiny_spec() -> SynthSpec {
    let mut spec = SynthSpec::toy(5, 2);
    for d in &mut spec.datasets {
        d.image_size = 64;
        d.nuclei = [2, 4];
    }
    spec
}

#[test]
fn manifest_round_trip_matches_memory() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    synth_generate(&spec, dir.path()).unwrap();
    let (manifest, base) = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    let loaded = manifest.samples(&base).unwrap();
    let (reg, memory) = synth_samples(&spec).unwrap();
    assert_eq!(CategoryRegistry::load(&dir.path().join("registry.json")).unwrap(), reg);
    assert_eq!(loaded, memory);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(TINY, &[]).unwrap();
    let (reg, samples) = synth_samples(&tiny_spec()).unwrap();
    let out = train(&cfg, &reg, samples.clone(), &samples, Some(dir.path())).unwrap();
    let path = dir.path().join("checkpoint.safetensors");
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.iteration, 2);
    for s in &samples {
        let a = out.model.predict(&s.image, s.dataset_id, 0.0).unwrap();
        let b = ck.model.predict(&s.image, s.dataset_id, 0.0).unwrap();
        assert_eq!(a, b);
    }
    let again = dir.path().join("again.safetensors");
    save_checkpoint(&again, &ck.model, &ck.config, ck.iteration).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let reports = evaluate_checkpoint(&path, &reg, &samples).unwrap();
    assert_eq!(reports, evaluate_samples(&out.model, &samples, &cfg).unwrap());
    assert_eq!(reports, out.reports);

    let other = CategoryRegistry::build(vec![DatasetDescriptor::new("z", &["tumor"], 6.0)]).unwrap();
    assert_eq!(evaluate_checkpoint(&path, &other, &samples).unwrap_err().kind(), ErrorKind::Data);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.safetensors");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn tiled_inference_stays_inside_the_image() {
    let cfg = RunConfig::from_toml(TINY, &[]).unwrap();
    let (reg, samples) = synth_samples(&tiny_spec()).unwrap();
    let out = train(&cfg, &reg, samples, &[], None).unwrap();
    let img = RgbImage::from_fn(150, 110, |x, y| image::Rgb([(x % 256) as u8, (y * 2 % 256) as u8, 200]));
    let radius = 6.0;
    let preds = sliding_window_infer(&out.model, &img, 1, &cfg.slice, radius, 0.0).unwrap();
    assert!(!preds.is_empty());
    for (i, p) in preds.iter().enumerate() {
        assert!(p.u >= -0.5 && p.v >= -0.5 && p.u < 150.0 && p.v < 110.0, "{p:?}");
        assert!(p.class < reg.num_classes(1));
        for q in &preds[i + 1..] {
            assert!((p.u - q.u).hypot(p.v - q.v) >= radius);
        }
    }
}

#[test]
fn training_log_is_ordered() {
    let cfg = RunConfig::from_toml(TINY, &["iterations=4".into()]).unwrap();
    let (reg, samples) = synth_samples(&tiny_spec()).unwrap();
    let out = train(&cfg, &reg, samples.clone(), &samples, None).unwrap();
    let steps: Vec<usize> = out
        .log
        .iter()
        .filter_map(|r| match r {
            cellprompt::train::LogRecord::Step { iteration, .. } => Some(*iteration),
            _ => None,
        })
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
    assert_eq!(out.reports.len(), reg.num_datasets());
}
