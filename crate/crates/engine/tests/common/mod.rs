#![allow(dead_code)]

use std::path::{Path, PathBuf};

use surveyor_engine::config::ExperimentConfig;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn anes_dir() -> PathBuf {
    fixtures().join("anes")
}

/// Config over the ANES fixture. `extra` is appended verbatim (methods,
/// variants, overrides).
pub fn anes_toml(base_url: &str, out: &Path, modes: &str, seeds: &str, extra: &str) -> String {
    format!(
        r#"
name = "test"
questionnaire = "questionnaire.csv"
personas = "personas.csv"
modes = {modes}
seeds = {seeds}
output_dir = "{out}"

[template]
user_file = "user_prompt.txt"
answer_field = "temperature"
question_stem = "How do you feel towards"

[provider]
base_url = "{base_url}"
model = "mock"
max_in_flight = 8
retry = {{ max_attempts = 3, backoff_base_ms = 1 }}

{extra}
"#,
        out = out.display()
    )
}

pub const RESTRICTED_JSON: &str = "[[methods]]\nkind = \"restricted_choice\"\njson_wrapper = true\n";

pub fn anes_config(base_url: &str, out: &Path, modes: &str, seeds: &str, extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&anes_toml(base_url, out, modes, seeds, extra), anes_dir()).expect("test config parses")
}

/// Copies the first `n` personas into `dir` and returns the file path.
pub fn first_personas(dir: &Path, n: usize) -> PathBuf {
    let text = std::fs::read_to_string(anes_dir().join("personas.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut wtr = csv::Writer::from_path(dir.join("personas.csv")).unwrap();
    wtr.write_record(rdr.headers().unwrap()).unwrap();
    for rec in rdr.records().take(n) {
        wtr.write_record(&rec.unwrap()).unwrap();
    }
    wtr.flush().unwrap();
    dir.join("personas.csv")
}
