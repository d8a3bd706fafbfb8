//! Single-stage vanilla KD with one shared teacher, for comparison with the
//! staged run of the same config.

use edu_distill::config::RunConfig;
use edu_distill::pipeline::{self, DistillOptions};
use edu_distill::trainer::NoObserver;

fn main() -> edu_distill::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.teacher.preset = Some("resnet_toy".into());
    cfg.teacher.epochs = 10;
    cfg.schedule.total_epochs = 30;
    cfg.schedule.eval_every = 5;
    cfg.optimizer.init_lr = 0.02;
    cfg.optimizer.lr_milestones = vec![25];
    cfg.output.run_id = "example".into();
    let kd = cfg.kd_baseline();
    kd.validate()?;
    print!("{}", pipeline::teacher_table(&pipeline::train_teachers(&kd)?));
    let outcome = pipeline::distill(&kd, &DistillOptions::default(), &mut NoObserver)?;
    if let Some(report) = outcome.report() {
        println!("{}: final top-1 {:.2}", report.run_id, report.final_top1);
    }
    Ok(())
}
