//! Zero-shot evaluation: the scripted oracle and an untrained library on
//! sketches of increasing length, plus one rollout in detail.

use taco::evaluation::*;
use taco::navworld::WorldConfig;
use taco::policy::PolicyLibrary;

fn main() -> taco::Result<()> {
    let world = WorldConfig::default();
    let oracle = ScriptedOracle { world: world.clone() };
    let random = PolicyLibrary::init(4, world.state_dim(), 2, &[100], 0)?;
    println!("{:<8} {:>12} {:>12}", "L_test", "oracle task", "random task");
    for l_test in 1..=6 {
        let cfg = EvalConfig { l_test, ..Default::default() };
        let a = task_accuracy(&oracle, &world, &cfg)?;
        let b = task_accuracy(&random, &world, &cfg)?;
        println!("{l_test:<8} {a:>12.2} {b:>12.2}");
    }
    let cfg = EvalConfig::default();
    let (w, sketch) = eval_task(&world, &cfg, 0);
    let result = rollout(&oracle, &w, &world, &sketch, &cfg, &mut taco::rng::stream(0, "example/noise"))?;
    println!("task 0: sketch {:?}", sketch.ids());
    for (i, k) in sketch.ids().iter().enumerate() {
        println!(
            "  sub-task {k}: success {}, {} steps, ended by {:?}",
            result.success[i], result.steps[i], result.terminated_by[i]
        );
    }
    Ok(())
}
