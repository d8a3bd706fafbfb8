//! Softened KL, the blended KD loss and its mixed-subset sum on a toy batch.

use std::collections::BTreeSet;

use edu_distill::loss::{combined_loss, ed_loss, softened_kl, DistillConfig, LogitBatch};
use edu_distill::Tensor;

fn main() -> edu_distill::Result<()> {
    let cfg = DistillConfig::default();
    let z = [2.0, 0.5, -1.0];
    let g = [3.0, -0.5, -1.0];
    println!("KL(z, z) = {}", softened_kl(&z, &z, cfg.tau)?);
    println!("KL(teacher || student) at tau {} = {:.6}", cfg.tau, softened_kl(&z, &g, cfg.tau)?);

    let student = Tensor::from_rows(&[z.to_vec(), vec![0.1, 1.2, 0.3], vec![-0.4, 0.0, 2.2]])?;
    let teacher = Tensor::from_rows(&[g.to_vec(), vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]])?;
    let single = LogitBatch::new(student.clone(), teacher.clone(), vec![0, 1, 2], vec![1, 1, 1])?;
    println!("combined loss, one subset: {:.6}", combined_loss(&single, &cfg)?);

    let mixed = LogitBatch::new(student, teacher, vec![0, 1, 2], vec![1, 2, 2])?;
    let registered: BTreeSet<usize> = [1, 2].into();
    let ed = ed_loss(&mixed, &registered, &cfg)?;
    for (t, s) in &ed.per_subset {
        println!("subset {t}: loss {:.6}, weight {:.3}", s.loss, s.weight);
    }
    println!("weighted total: {:.6}", ed.total);
    Ok(())
}
