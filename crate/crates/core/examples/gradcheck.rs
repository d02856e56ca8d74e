//! Finite-difference check of the full objective (compensation, fusion and
//! masked contrastive loss), then the same check with a corrupted backward
//! rule to show that the faulty op is named.

use ncl::numerics::OpKind;
use ncl::run::pipeline_grad_check;

fn main() -> ncl::Result<()> {
    let report = pipeline_grad_check(0, None)?;
    for (group, (name, err)) in report.worst_by_group() {
        println!(
            "group {:<5} worst relative error {err:.2e} ({name})",
            group.as_str()
        );
    }
    println!("passed: {}", report.passed);

    let faulty = pipeline_grad_check(0, Some(OpKind::MaxPoolRows))?;
    println!(
        "with a corrupted max-pool backward: passed {}, offending op {}",
        faulty.passed,
        faulty.offending_op.map_or("none", |k| k.name())
    );
    Ok(())
}
