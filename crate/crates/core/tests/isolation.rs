use slm_core::config::Config;
use slm_core::data::{generate_synthetic_pda, PdaTask};
use slm_core::trainer::{prepare_data, train, Trainer};

fn small(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.seed = seed;
    for (k, v) in [
        ("train.steps", "60"),
        ("train.eval_every", "0"),
        ("task.source_per_class", "20"),
        ("task.target_per_class", "20"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn run_bytes(cfg: &Config, task: &PdaTask) -> (Vec<u8>, Vec<String>) {
    let mut lines = vec![];
    let run = train(cfg, task, &mut |r| {
        let mut r = r.clone();
        r.target_accuracy = None;
        lines.push(serde_json::to_string(&r).unwrap());
        Ok(())
    })
    .unwrap();
    (run.trainer.checkpoint().to_bytes(), lines)
}

#[test]
fn selector_moves_only_through_the_selection_loss() {
    let mut cfg = small(1);
    for (k, v) in [
        ("select.lambda_s", "0"),
        ("select.lambda_reg1", "0"),
        ("select.lambda_reg2", "0"),
        ("train.wd_selector", "0"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let task = generate_synthetic_pda(&cfg.task_spec()).unwrap();
    let data = prepare_data(&cfg, &task);
    let mut trainer = Trainer::new(&cfg, &data).unwrap();
    let before = trainer.models().clone();
    for _ in 0..cfg.train.steps {
        trainer.step(&data).unwrap();
    }
    let after = trainer.models();
    assert_eq!(
        after.h, before.h,
        "selector changed without a selection loss"
    );
    assert_ne!(after.g, before.g);
    assert_ne!(after.f, before.f);
}

#[test]
fn selector_trains_when_its_loss_is_on() {
    let cfg = small(1);
    let task = generate_synthetic_pda(&cfg.task_spec()).unwrap();
    let data = prepare_data(&cfg, &task);
    let mut trainer = Trainer::new(&cfg, &data).unwrap();
    let before = trainer.models().h.clone();
    for _ in 0..10 {
        trainer.step(&data).unwrap();
    }
    assert_ne!(trainer.models().h, before);
}

#[test]
fn training_never_reads_evaluation_labels() {
    let cfg = small(4);
    let task = generate_synthetic_pda(&cfg.task_spec()).unwrap();
    let mut blinded = task.clone();
    let classes = task.train.num_classes;
    blinded
        .eval
        .target_labels
        .iter_mut()
        .for_each(|l| *l = l.map(|c| (c + 1) % classes));
    blinded.eval.oracle.iter_mut().for_each(|o| *o = !*o);
    blinded.shared = vec![classes - 1];
    assert_eq!(run_bytes(&cfg, &task), run_bytes(&cfg, &blinded));
}
