//! Trains on the synthetic fixture and reports probes and 5-way 1-shot
//! accuracy with and without generated samples.
//!
//! `cargo run --release -p disgenib-core --example fixture_pipeline -- [seed] [epochs]`

use disgenib::config::RunConfig;
use disgenib::data::synth_make;
use disgenib::fsl::{eval_episodes, probe_disentanglement, EvalConfig};
use disgenib::model::DisGenModel;
use disgenib::train::Trainer;

fn main() -> disgenib::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::default();
    cfg.seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    cfg.train.epochs = args.next().map_or(300, |s| s.parse().expect("epochs"));
    cfg.objective.alpha = 9.0;

    let (ds, _) = synth_make(&cfg.data.synth(), cfg.seed)?;
    let (base, novel) = cfg.split(&ds)?;
    let model = DisGenModel::init(cfg.model_dims(&base), cfg.model.sigma_rec, cfg.seed)?;
    let mut trainer = Trainer::new(model, &cfg.objective, cfg.train.clone(), None, cfg.seed)?;
    for _ in 0..cfg.train.epochs {
        let rec = trainer.run_epoch(&base)?;
        if rec.epoch % 50 == 0 {
            println!("epoch {:>4} loss {:.4}", rec.epoch, rec.loss.total);
        }
    }

    let probe = probe_disentanglement(&trainer.model, &base, cfg.seed)?;
    println!(
        "probe: A {:.3} Z {:.3} chance {:.3}",
        probe.acc_from_a, probe.acc_from_z, probe.chance
    );
    for baseline in [false, true] {
        let ecfg = EvalConfig {
            baseline,
            ..cfg.eval.clone()
        };
        let r = eval_episodes(&trainer.model, &novel, Some(&base), None, &ecfg, cfg.seed)?;
        println!(
            "{:<9} {:.2}% +- {:.2} cosine {:.3}",
            r.mode,
            100.0 * r.mean_accuracy,
            100.0 * r.ci95,
            r.mean_cosine
        );
    }
    Ok(())
}
