//! Grows each toy student stage by stage, then checks that the restored
//! final model has the reference architecture.

use edu_distill::model::{advance_stage, assemble_stage_model, presets, reference_network};
use edu_distill::schedule::StageSchedule;

fn main() -> edu_distill::Result<()> {
    for spec in [presets::resnet_toy(3, 8, 9), presets::vgg_toy(3, 8, 9), presets::mobile_toy(3, 8, 9)] {
        let schedule = StageSchedule::fixed(&spec, 3, vec![50, 80], 240)?;
        let mut model = assemble_stage_model(&spec, &schedule, 1, 0)?;
        println!("{}", spec.name);
        loop {
            println!(
                "  stage {}: {} params, {} frozen, {} trainable",
                model.stage(),
                model.num_params(),
                model.frozen_param_ids().len(),
                model.trainable_param_ids().len()
            );
            if model.is_final() {
                break;
            }
            model = advance_stage(model, &spec, &schedule)?;
        }
        let reference = reference_network(&spec, 0)?;
        println!("  matches reference: {}", model.fingerprint() == reference.fingerprint());
    }
    Ok(())
}
