//! Splits a 100-class label set into three class-disjoint sub-datasets and
//! prints the group sizes and the file format.

use edu_distill::partition::{partition, PartitionMode};

fn main() -> edu_distill::Result<()> {
    let labels: Vec<usize> = (0..1000).map(|i| i % 100).collect();
    let p = partition(&labels, 3, &[1.0, 1.0, 1.0], PartitionMode::ClassDisjoint, 42)?;
    println!("class-disjoint sizes: {:?}", p.group_sizes());
    print!("{}", p.to_text());

    let p = partition(&labels, 3, &[2.0, 1.0, 1.0], PartitionMode::SampleDisjoint, 42)?;
    println!("sample-disjoint sizes at 2:1:1: {:?}", p.group_sizes());
    Ok(())
}
