//! A configured run interrupted half-way and resumed from its checkpoint
//! ends with the same weights as an uninterrupted one.

use seqlab::config::RunConfig;
use seqlab::run;

const CONFIG: &str = r#"
seed = 3
[data.task]
kind = "copy"
vocab_size = 16
max_len = 8
count = 200
[model]
hidden_size = 16
filter_size = 32
max_positions = 24
[train]
total_steps = 40
checkpoint_every = 10
log_every = 10
precision = "f64"
[decode]
max_length = 20
"#;

fn main() -> seqlab::Result<()> {
    let root = std::env::temp_dir().join(format!("seqlab-resume-{}", std::process::id()));
    let at = |name: &str, steps: u64| {
        RunConfig::from_toml_with(
            CONFIG,
            &[
                format!("output_dir = {:?}", root.join(name).to_string_lossy()),
                format!("train.total_steps = {steps}"),
            ],
        )
    };

    let full = run::train(&at("full", 40)?, false)?;
    run::train(&at("split", 20)?, false)?;
    let resumed = run::train(&at("split", 40)?, true)?;
    println!("uninterrupted: step {} loss {:.6}", full.final_step, full.final_loss);
    println!("resumed:       step {} loss {:.6}", resumed.final_step, resumed.final_loss);
    let same = std::fs::read(&full.checkpoint)? == std::fs::read(&resumed.checkpoint)?;
    println!("identical final checkpoints: {same}");
    std::fs::remove_dir_all(&root)?;
    Ok(())
}
