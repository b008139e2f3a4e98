//! One desk-scale training run on synthetic data, with timing.
//!
//! `cargo run --release --example desk_run -- [seed] [section.key=value ...]`

use std::time::Instant;

use gcvase::batch::holdout_split;
use gcvase::config::RunConfig;
use gcvase::probe::evaluate_latents;
use gcvase::synthdata::generate;
use gcvase::train::{adjacency_for, compare_finetune, finetune_adapter, latent_table, train};

fn main() -> gcvase::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = RunConfig::desk();
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().expect("seed"));
    for o in args.iter().skip(2) {
        cfg.set_override(o)?;
    }
    let t = Instant::now();
    let (ds, _) = generate(&cfg.data.synth)?;
    println!("synth: {} epochs in {:.1}s", ds.len(), t.elapsed().as_secs_f64());
    let plan = holdout_split(&ds.subjects(), &ds.tasks(), cfg.data.ratios, cfg.data.split_seed)?;
    let out = train(&ds, &plan, &cfg, seed)?;
    println!("train: {:.1}s, best epoch {:?}", out.wall_clock_secs, out.best_epoch);
    for d in &out.history.dev {
        println!("  dev epoch {} subject BA {:.3}", d.epoch + 1, d.subject_balanced_accuracy);
    }
    let spe = out.history.steps.len() / cfg.train.epochs;
    let rec = out.history.epoch_means(spe, |l| l.reconstruction);
    let cs = out.history.epoch_means(spe, |l| 2.0 * l.clip_subject);
    let ct = out.history.epoch_means(spe, |l| 2.0 * l.clip_task);
    for e in (0..rec.len()).step_by(5).chain([rec.len() - 1]) {
        println!("  epoch {:>3} rec {:.4} clip_S {:.4} clip_T {:.4}", e + 1, rec[e], cs[e], ct[e]);
    }
    println!("  tau {:.3}", out.history.steps.last().unwrap().tau);
    let ahat = adjacency_for(&cfg)?;
    let table = latent_table(&out.best_checkpoint.model, &ahat, &ds)?;
    print!("{}", evaluate_latents(&table, &ds, &plan, &cfg.train.probe)?.to_text());
    if std::env::var_os("FT").is_some() {
        let ft = finetune_adapter(&out.best_checkpoint, &ds, &plan.test, seed)?;
        let cmp = compare_finetune(&out.best_checkpoint, &ft, &ds, &plan)?;
        println!(
            "finetune: loss {:.4} -> {:.4}, held-out subject BA {:.4} -> {:.4}",
            ft.epoch_losses[0],
            ft.epoch_losses[ft.epoch_losses.len() - 1],
            cmp.baseline.balanced_accuracy,
            cmp.finetuned.balanced_accuracy
        );
    }
    Ok(())
}
