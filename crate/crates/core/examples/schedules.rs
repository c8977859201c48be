//! Golden-token probabilities over training and decoding steps, the
//! expected number of sampled inputs, and joint schedules.

use seqlab::schedules::{presets, JointMethod, JointSpec, ScheduleSpec};

fn main() -> seqlab::Result<()> {
    let dec = presets::translation_decoding_steps();
    let specs = [
        dec.linear.clone(),
        dec.exponential.clone(),
        dec.sigmoid.clone(),
        dec.exponential.clone().increase(),
        ScheduleSpec::uniform(0.5),
    ];
    for (n, s) in specs.iter().enumerate() {
        println!("[{n}] {}", s.label());
    }
    println!(
        "{:>4} {}",
        "t",
        (0..specs.len()).map(|n| format!("{:>8}", format!("[{n}]"))).collect::<String>()
    );
    for t in [0u64, 8, 16, 32, 64, 128] {
        let row: Vec<String> = specs
            .iter()
            .map(|s| Ok(format!("{:>8.4}", s.eval(t)?)))
            .collect::<seqlab::Result<_>>()?;
        println!("{t:>4} {}", row.concat());
    }

    println!("\naccumulated sampled inputs over the first 50 decoding steps");
    for s in &specs {
        println!("  {:<40} {:>6.2}", s.label(), s.build()?.accumulated_errors(50.0));
    }

    let f = presets::translation_training_steps().sigmoid;
    println!("\nh(i, t) at t = 20 for i = 0, 100k, 200k, 300k");
    for method in [JointMethod::Product, JointMethod::ArithmeticMean, JointMethod::Composite] {
        let h = JointSpec::new(method, f.clone(), dec.exponential.clone()).build()?;
        let row: Vec<String> = [0u64, 100_000, 200_000, 300_000]
            .iter()
            .map(|&i| format!("{:.3}", h.eval(i, 20)))
            .collect();
        println!("  {:<15} {}", format!("{method:?}"), row.join(" "));
    }
    Ok(())
}
