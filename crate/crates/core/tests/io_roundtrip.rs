use cpsc::io::{load_checkpoint, load_dataset, read_checkpoint, save_checkpoint, save_dataset, write_checkpoint};
use cpsc::model::{CpscModel, ModelConfig};
use cpsc::numeric::Parameterized;
use cpsc::synth::{CorruptionKind, CorruptionSpec, Dataset, GenSpec};
use cpsc::trainer::{run, Method, RunConfig, Splits};

fn bits(model: &CpscModel) -> Vec<u64> {
    model.flat_params().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn trained_checkpoint_round_trips_bit_exactly() {
    let mut cfg = RunConfig::default().with_seed(1);
    cfg.data.pool_size = 200;
    cfg.data.test_size = 50;
    cfg.train.warmup_epochs = 1;
    cfg.train.total_epochs = 3;
    let splits = Splits::build(&cfg.data, 0.2, 1).unwrap();
    let r = run(&cfg, Method::Cpsc, &splits).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("final.ckpt");
    save_checkpoint(&path, &r.model).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), r.model.config());
    assert_eq!(bits(&back), bits(&r.model));
    let names: Vec<_> = back.params().iter().map(|p| p.name.clone()).collect();
    let orig: Vec<_> = r.model.params().iter().map(|p| p.name.clone()).collect();
    assert_eq!(names, orig);

    // Saving the loaded copy reproduces the same bytes.
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_checkpoint(&mut a, &r.model).unwrap();
    write_checkpoint(&mut b, &back).unwrap();
    assert_eq!(a, b);
}

#[test]
fn special_values_survive() {
    let mut model = CpscModel::new(ModelConfig::default(), 2).unwrap();
    let specials = [f64::MIN_POSITIVE / 3.0, -0.0, 1e308, f64::EPSILON];
    for (v, s) in model.params_mut()[0].value.data_mut().iter_mut().zip(specials) {
        *v = s;
    }
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model).unwrap();
    assert_eq!(bits(&read_checkpoint(buf.as_slice()).unwrap()), bits(&model));
}

#[test]
fn mismatched_architecture_is_rejected() {
    let model = CpscModel::new(ModelConfig::default(), 2).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model).unwrap();
    // Corrupt the first block's row count (just past the first name).
    let needle = b"enc0.hidden.weight";
    let at = buf.windows(needle.len()).position(|w| w == needle).unwrap() + needle.len();
    buf[at] ^= 1;
    assert!(read_checkpoint(buf.as_slice()).is_err());
}

#[test]
fn dataset_round_trips_bit_exactly() {
    let mut spec = GenSpec::imbalanced(&[1.0, 0.3, 0.0], 5, 64, 7);
    spec.modalities[2].dim = 3;
    let mut data = Dataset::generate(&spec).unwrap();
    let noise = CorruptionSpec {
        kind: CorruptionKind::SaltPepper,
        strength: 10.0,
        modalities: vec![1],
        ..Default::default()
    };
    Dataset::corrupt_samples(&mut data.samples, &noise, 7, 0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    save_dataset(&path, &data).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.spec, data.spec);
    let flat = |d: &Dataset| -> Vec<u64> {
        d.samples
            .iter()
            .flat_map(|s| s.features.iter().chain(&s.clean).flatten().map(|x| x.to_bits()))
            .chain(d.prototypes.iter().flatten().flatten().map(|x| x.to_bits()))
            .collect()
    };
    assert_eq!(flat(&back), flat(&data));
    assert_eq!(
        back.samples.iter().map(|s| s.label).collect::<Vec<_>>(),
        data.samples.iter().map(|s| s.label).collect::<Vec<_>>()
    );
}
