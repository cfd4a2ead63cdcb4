use slm_core::config::Config;
use slm_core::data::generate_synthetic_pda;
use slm_core::trainer::{
    load_checkpoint, prepare_data, save_checkpoint, Checkpoint, CheckpointError, Trainer,
};

fn trained(steps: usize) -> (Checkpoint, Trainer, slm_core::data::TrainData) {
    let mut cfg = Config::default();
    cfg.set("task.source_per_class", "20").unwrap();
    cfg.set("task.target_per_class", "20").unwrap();
    let task = generate_synthetic_pda(&cfg.task_spec()).unwrap();
    let data = prepare_data(&cfg, &task);
    let mut trainer = Trainer::new(&cfg, &data).unwrap();
    for _ in 0..steps {
        trainer.step(&data).unwrap();
    }
    (trainer.checkpoint(), trainer, data)
}

#[test]
fn round_trip_through_a_file() {
    let (ckpt, _, _) = trained(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.step, 5);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
}

#[test]
fn header_records_names_and_shapes() {
    let (ckpt, _, _) = trained(1);
    let bytes = ckpt.to_bytes();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
    let manifest = header["manifest"].as_array().unwrap();
    let first = &manifest[0];
    assert_eq!(first["name"], "G.0.weight");
    let g0 = ckpt.models.g.layers[0].weight.shape().to_vec();
    assert_eq!(first["shape"], serde_json::json!(g0));
    let values: usize = manifest
        .iter()
        .map(|e| {
            e["shape"]
                .as_array()
                .unwrap()
                .iter()
                .map(|d| d.as_u64().unwrap() as usize)
                .product::<usize>()
        })
        .sum();
    assert_eq!(values, 2 * ckpt.models.num_params());
    assert_eq!(bytes.len() - nl - 1, values * 8);
}

#[test]
fn truncated_files_are_rejected() {
    let (ckpt, _, _) = trained(1);
    let bytes = ckpt.to_bytes();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    for cut in [0, nl / 2, nl + 1, bytes.len() - 8, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(
            matches!(
                err,
                CheckpointError::Manifest(_) | CheckpointError::Header(_)
            ),
            "cut {cut}: {err}"
        );
    }
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 8]);
    assert!(Checkpoint::from_bytes(&long).is_err());
}

#[test]
fn other_versions_are_rejected() {
    let (ckpt, _, _) = trained(1);
    let bytes = ckpt.to_bytes();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
    header["version"] = serde_json::json!(99);
    let mut edited = serde_json::to_vec(&header).unwrap();
    edited.extend_from_slice(&bytes[nl..]);
    match Checkpoint::from_bytes(&edited) {
        Err(CheckpointError::Version { found: 99, .. }) => {}
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn mismatched_manifest_is_rejected() {
    let (ckpt, _, _) = trained(1);
    let bytes = ckpt.to_bytes();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
    header["manifest"][0]["name"] = serde_json::json!("G.0.renamed");
    let mut edited = serde_json::to_vec(&header).unwrap();
    edited.extend_from_slice(&bytes[nl..]);
    assert!(matches!(
        Checkpoint::from_bytes(&edited),
        Err(CheckpointError::Manifest(_))
    ));
}

#[test]
fn loaded_models_predict_identically() {
    let (ckpt, trainer, data) = trained(6);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    let x = data.target_matrix();
    assert_eq!(
        back.models.classify(&x).unwrap(),
        trainer.models().classify(&x).unwrap()
    );
    assert_eq!(
        back.models.selector_logits(&x).unwrap(),
        trainer.models().selector_logits(&x).unwrap()
    );
}
