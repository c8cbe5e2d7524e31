use std::path::PathBuf;
use std::sync::Arc;

use sgrnn_core::data::{Vocab, END_TOKEN, START_ID};
use sgrnn_core::models::generate;
use sgrnn_core::{Parameterized, SeededRng};

use crate::checkpoint::load_checkpoint;
use crate::config::{RunConfig, Task};
use crate::error::{CliError, IoContext, Result};
use crate::layout::RunLayout;
use crate::task::{build_lm, tokens_of};

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    /// Checkpoint directory; defaults to `<out>/final`.
    pub checkpoint: Option<PathBuf>,
    pub prefix: String,
    pub length: usize,
    /// 0 picks the most likely token every step.
    pub temperature: f64,
}

/// Continues `prefix` with up to `length` sampled tokens; deterministic
/// given the seed. Returns the prefix followed by the continuation.
pub fn cmd_generate(cfg: &RunConfig, opts: &GenerateOptions) -> Result<String> {
    if !cfg.task.is_lm() {
        return Err(CliError::usage("generate needs a language-model task"));
    }
    let layout = RunLayout::new(&cfg.out);
    let text = std::fs::read_to_string(layout.vocab()).at(layout.vocab())?;
    let vocab = Vocab::from_text(&text)?;
    let mut model = build_lm(cfg, &vocab, &mut SeededRng::new(0))?;
    let dir = opts.checkpoint.clone().unwrap_or_else(|| layout.final_checkpoint());
    model.load_flat(&load_checkpoint(&dir, &Arc::new(model.param_index()))?.params)?;

    let mut tokens = tokens_of(cfg.task, &opts.prefix);
    // Word-level tokenisation closes every line; keep the prompt open.
    if tokens.last().map(String::as_str) == Some(END_TOKEN) {
        tokens.pop();
    }
    let mut prefix = vec![START_ID];
    prefix.extend(vocab.encode(&tokens));
    let mut rng = SeededRng::new(cfg.seed);
    let out = generate(&model, &prefix, opts.length, opts.temperature, &mut rng)?;

    let words = vocab.decode(&out)?;
    Ok(match cfg.task {
        Task::CharLm => format!("{}{}", opts.prefix, words.concat()),
        _ => {
            let mut all: Vec<&str> = tokens.iter().map(String::as_str).collect();
            all.extend(words);
            all.join(" ")
        }
    })
}
