//! The synthetic task suite: splits, prefixes and text serialization.

use hyperdecoder::tasks::{build_suite_with, load_examples, tokens_to_string, PrefixPolicy, Split, SuiteOptions};

fn main() -> hyperdecoder::Result<()> {
    let suite = build_suite_with(
        7,
        &SuiteOptions {
            prefix_policy: PrefixPolicy::Named,
            ..SuiteOptions::default()
        },
    );
    for t in &suite.tasks {
        let e = &t.train[0];
        println!(
            "{:<10} {:?} train {:>4} dev {} test {} ood {}   {} => {}",
            t.spec.name,
            t.spec.kind(),
            t.train.len(),
            t.dev.len(),
            t.test.len(),
            t.ood.len(),
            tokens_to_string(&e.input),
            tokens_to_string(&e.target)
        );
    }
    let o = &suite.tasks[1].ood[0];
    println!("ood reverse: {} => {}", tokens_to_string(&o.input), tokens_to_string(&o.target));

    let text = suite.dump_split(Split::Dev);
    let back = load_examples(&text)?;
    println!("dev dump: {} lines, {} examples parsed back", text.lines().count(), back.len());
    Ok(())
}
