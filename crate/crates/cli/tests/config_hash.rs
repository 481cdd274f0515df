use std::path::PathBuf;

use dprobe_cli::LoadedConfig;
use proptest::prelude::*;

fn config(seed: u64, epochs: u64, lr: f64, first: &str, second: &str) -> String {
    format!(
        r#"
seed = {seed}

[datasets.{first}]
idx = {{ images = "{first}-images.idx", labels = "{first}-labels.idx" }}

[datasets.{second}]
idx = {{ images = "{second}-images.idx", labels = "{second}-labels.idx" }}

[[stage]]
name = "m"
kind = "train"
data = "{first}"
config = {{ epochs = {epochs}, optimizer = {{ lr = {lr:?} }} }}
"#
    )
}

fn hash(text: &str) -> String {
    LoadedConfig::parse(text, PathBuf::from("."), None).unwrap().hash
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Any edited value gives a different hash.
    #[test]
    fn every_change_changes_the_hash(seed in 0..=i64::MAX as u64 / 2, epochs in 0u64..50, lr in 0.01f64..5.0, d in 1u64..1000) {
        let base = hash(&config(seed, epochs, lr, "a", "b"));
        prop_assert_ne!(&base, &hash(&config(seed.wrapping_add(d), epochs, lr, "a", "b")));
        prop_assert_ne!(&base, &hash(&config(seed, epochs + d, lr, "a", "b")));
        prop_assert_ne!(&base, &hash(&config(seed, epochs, lr * 1.5, "a", "b")));
        prop_assert_ne!(&base, &hash(&config(seed, epochs, lr, "b", "a")));
        let overridden = LoadedConfig::parse(&config(seed, epochs, lr, "a", "b"), PathBuf::from("."), Some(seed ^ d)).unwrap();
        prop_assert_ne!(&base, &overridden.hash);
    }

    /// Formatting, comments and table order do not.
    #[test]
    fn layout_does_not_change_the_hash(seed in 0..=i64::MAX as u64, epochs in 0u64..50) {
        let text = config(seed, epochs, 1.0, "a", "b");
        let base = hash(&text);
        let commented = format!("# header\n{}", text.replace("\n\n", "\n\n# note\n\n"));
        prop_assert_eq!(&base, &hash(&commented));
        let (head, rest) = text.split_at(text.find("[datasets.b]").unwrap());
        let (b_table, stages) = rest.split_at(rest.find("[[stage]]").unwrap());
        let a_start = head.find("[datasets.a]").unwrap();
        let reordered = format!("{}{b_table}{}{stages}", &head[..a_start], &head[a_start..]);
        prop_assert_eq!(&base, &hash(&reordered));
    }
}

#[test]
fn seeds_are_limited_to_the_toml_integer_range() {
    let text = config(i64::MAX as u64, 1, 1.0, "a", "b");
    assert!(LoadedConfig::parse(&text, PathBuf::from("."), None).is_ok());
    let err = LoadedConfig::parse(&text, PathBuf::from("."), Some(u64::MAX)).unwrap_err();
    assert_eq!(err.exit_code(), dprobe_cli::error::exit_code::CONFIG);
    assert!(err.to_string().contains("seed"), "{err}");
}
