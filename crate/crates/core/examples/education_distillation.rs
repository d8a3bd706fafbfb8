//! End-to-end staged run on the synthetic dataset: partition, teachers,
//! distillation and the report, written under `runs/example-ed`.
//!
//! Pass a config path to use your own settings.

use edu_distill::config::RunConfig;
use edu_distill::pipeline::{self, DistillOptions};
use edu_distill::trainer::{NoObserver, RunOutcome};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.teacher.preset = Some("resnet_toy".into());
            cfg.teacher.epochs = 10;
            cfg.schedule.advance_epochs = vec![10, 20];
            cfg.schedule.total_epochs = 30;
            cfg.schedule.eval_every = 2;
            cfg.optimizer.init_lr = 0.02;
            cfg.optimizer.lr_milestones = vec![25];
            cfg.output.run_id = "example-ed".into();
            cfg
        }
    };
    cfg.validate()?;
    let data = pipeline::load_dataset(&cfg)?;
    let (path, part) = pipeline::write_partition(&cfg, &data)?;
    println!("partition {:?} -> {}", part.group_sizes(), path.display());
    print!("{}", pipeline::teacher_table(&pipeline::train_teachers(&cfg)?));
    if let RunOutcome::Completed(report) = pipeline::distill(&cfg, &DistillOptions::default(), &mut NoObserver)? {
        println!("advances at epochs {:?}", report.advance_epochs);
        println!("final top-1 {:.2}", report.final_top1);
    }
    let matrix = std::fs::read_to_string(cfg.run_dir().join(pipeline::REPORT_DIR).join("forgetting_matrix.md"))?;
    print!("{matrix}");
    Ok(())
}
