use mmr_core::{checkpoint, ComputeWidth, Float, Model, Sampling, Tokenizer};

use crate::failure::{usage, CmdResult, Context};
use crate::GenerateArgs;

pub fn run(args: &GenerateArgs) -> CmdResult {
    let sampling = match (args.temperature, args.top_p) {
        (None, None) => Sampling::Greedy,
        (Some(t), None) => Sampling::Temperature(t),
        (t, Some(p)) => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(usage(format!("--top-p must lie in (0, 1], got {p}")));
            }
            Sampling::TopP { temperature: t.unwrap_or(1.0), p }
        }
    };
    if matches!(sampling, Sampling::Temperature(t) | Sampling::TopP { temperature: t, .. } if t < 0.0) {
        return Err(usage("--temperature must be non-negative"));
    }
    let tokenizer = match &args.vocab {
        Some(p) => Tokenizer::from_vocab_file(p).context("--vocab")?,
        None => Tokenizer::Bytes,
    };
    let bytes = std::fs::read(&args.ckpt).context(format!("reading {}", args.ckpt.display()))?;
    let (header, _) = checkpoint::read_header(&bytes).context(args.ckpt.display())?;
    let prompt = tokenizer.encode(args.prompt.as_bytes())?;
    let tokens = match header.config.precision.compute {
        ComputeWidth::Single => complete::<f32>(&bytes, &prompt, args, sampling)?,
        ComputeWidth::Double => complete::<f64>(&bytes, &prompt, args, sampling)?,
    };
    println!("{}", tokenizer.decode_lossy(&tokens)?);
    Ok(())
}

fn complete<T: Float>(bytes: &[u8], prompt: &[usize], args: &GenerateArgs, sampling: Sampling) -> CmdResult<Vec<usize>> {
    let (model, _) = checkpoint::from_bytes::<T>(bytes)?;
    let model: Model<T> = model;
    Ok(model.generate(prompt, args.max_new, sampling, args.seed, !args.no_cache)?)
}
