use casr::config::RunConfig;
use casr::dataset::{generate_split, Split};
use casr::model::CascadedModel;
use casr::trainer::Trainer;

#[test]
fn loss_halves_on_the_default_task() {
    let run = RunConfig::default();
    let data = generate_split(&run.task, &run.data, Split::Train, run.data.train_utterances).unwrap();
    let model = CascadedModel::new(run.model.clone(), run.train.seed).unwrap();
    let mut trainer = Trainer::new(model, run.train.clone()).unwrap();
    let losses: Vec<f64> = (0..1000).map(|_| trainer.step_on(&data).unwrap().loss).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (early, late) = (mean(&losses[..100]), mean(&losses[900..]));
    assert!(late < 0.5 * early, "steps 1-100 mean {early:.3}, steps 901-1000 mean {late:.3}");
}
