use mmr_core::{checkpoint, route_stats, Tokenizer};

use crate::failure::{usage, CmdResult, Context};
use crate::RouteStatsArgs;

pub fn run(args: &RouteStatsArgs) -> CmdResult {
    if !(args.fraction > 0.0 && args.fraction <= 1.0) {
        return Err(usage(format!("--fraction must lie in (0, 1], got {}", args.fraction)));
    }
    let (model, _) = checkpoint::load::<f32>(&args.ckpt).context(args.ckpt.display())?;
    if model.routers().is_empty() {
        return Err(usage("checkpoint has no mixture-of-experts layers"));
    }
    let tokenizer = match &args.vocab {
        Some(p) => Tokenizer::from_vocab_file(p).context("--vocab")?,
        None => Tokenizer::Bytes,
    };
    let text = std::fs::read(&args.data).context(format!("reading {}", args.data.display()))?;
    let tokens = tokenizer.encode(&text)?;
    let start = tokens.len() - (tokens.len() as f64 * args.fraction).floor() as usize;
    let held_out = &tokens[start..tokens.len().min(start + args.max_tokens)];
    if held_out.is_empty() {
        return Err(usage("no tokens to route"));
    }
    let stats = route_stats(&model, held_out, model.config().max_seq_len)?;
    println!("{}", serde_json::to_string_pretty(&stats).map_err(anyhow::Error::from)?);
    Ok(())
}
