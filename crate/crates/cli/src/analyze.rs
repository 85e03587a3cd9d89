use mmr_core::analysis::{self, ComplexityReport};
use mmr_core::{complexity_report, ComputeWidth, ModelConfig};

use crate::failure::{usage, CmdResult};
use crate::run_config::RunConfigFile;
use crate::{AnalyzeArgs, Format};

pub fn run(args: &AnalyzeArgs) -> CmdResult {
    let config = match (&args.config, &args.preset) {
        (Some(path), _) => RunConfigFile::load(path)?.model,
        (None, Some(name)) => ModelConfig::preset(name).ok_or_else(|| usage(format!("unknown preset {name}")))?,
        (None, None) => return Err(usage("one of --config or --preset is required")),
    };
    if args.seq_len == 0 || args.batch == 0 {
        return Err(usage("--seq-len and --batch must be positive"));
    }
    let mut report = complexity_report(&config, args.seq_len, args.batch)?;
    if args.measure {
        if args.seq_len as usize > config.max_seq_len {
            return Err(usage(format!(
                "--measure needs --seq-len <= max_seq_len ({})",
                config.max_seq_len
            )));
        }
        let measured = match config.precision.compute {
            ComputeWidth::Single => analysis::measure::<f32>(&config, args.seq_len as usize)?,
            ComputeWidth::Double => analysis::measure::<f64>(&config, args.seq_len as usize)?,
        };
        report = report.with_measurement(measured);
    }
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?),
        Format::Table => print!("{}", table(&rows(&report))),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.write_record(["metric", "value", "unit"]).map_err(anyhow::Error::from)?;
            for r in rows(&report) {
                w.write_record([r.0, r.1, r.2]).map_err(anyhow::Error::from)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn megabytes(bytes: u64) -> String {
    let mb = bytes as f64 / (1u64 << 20) as f64;
    if mb.fract() == 0.0 {
        format!("{mb:.0}")
    } else {
        format!("{mb:.2}")
    }
}

/// `(metric, value, unit)` rows shared by the table and CSV outputs.
fn rows(r: &ComplexityReport) -> Vec<(String, String, String)> {
    let i = &r.inputs;
    let a = &r.analytic;
    let mut out: Vec<(String, String, String)> = Vec::new();
    let mut push = |m: &str, v: String, u: &str| out.push((m.to_string(), v, u.to_string()));
    push("attention", format!("{:?}", i.attention).to_lowercase(), "");
    push("ffn", format!("{:?}", i.ffn).to_lowercase(), "");
    push("seq_len", i.n.to_string(), "tokens");
    push("batch", i.batch.to_string(), "sequences");
    push("d_model", i.d.to_string(), "");
    push("latent_dim", i.r.to_string(), "");
    push("rho", i.rho.to_string(), "");
    push("layers", i.layers.to_string(), "");
    push("heads", i.heads.to_string(), "");
    push("experts", format!("{} ({} shared, top-{})", i.n_experts, i.n_shared, i.top_k), "");
    push("c_mha per layer", a.c_mha.to_string(), "MAC");
    push("c_mla as stated per layer", a.c_mla_as_stated.to_string(), "MAC");
    push("c_mha as implemented per layer", a.c_mha_as_implemented.to_string(), "FLOP");
    push("c_mla as implemented per layer", a.c_mla_as_implemented.to_string(), "FLOP");
    push("c_moe routing per token", a.c_moe.routing.to_string(), "FLOP");
    push("c_moe routed experts per token", a.c_moe.active_experts.to_string(), "FLOP");
    push("c_moe shared experts per token", a.c_moe.shared_experts.to_string(), "FLOP");
    push("layer cost", a.c_combined.to_string(), "FLOP");
    push("forward pass", a.flops_forward.to_string(), "FLOP");
    push("speedup (asymptotic)", a.speedup_asymptotic.to_string(), "x");
    push("kv cache full attention", a.kv_bytes_baseline.to_string(), "B");
    push("kv cache full attention", megabytes(a.kv_bytes_baseline), "MB");
    push("kv cache latent per head", a.kv_bytes_theorem.to_string(), "B");
    push("kv cache latent shared", a.kv_bytes_shared.to_string(), "B");
    push("kv cache latent shared", megabytes(a.kv_bytes_shared), "MB");
    push("kv cache this config", megabytes(a.kv_bytes_model), "MB");
    push("kv reduction factor", a.reduction_factor.to_string(), "");
    if let (Some(m), Some(d)) = (&r.measured, &r.deltas) {
        push("measured forward flops", m.flops_forward.to_string(), "FLOP");
        push("forward flops delta", d.flops.to_string(), "FLOP");
        push("measured kv cache bytes", m.kv_bytes_live.to_string(), "B");
        push("kv cache bytes delta", d.kv_bytes.to_string(), "B");
    }
    out
}

fn table(rows: &[(String, String, String)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let value_width = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    rows.iter()
        .map(|(m, v, u)| format!("{:<width$}  {:>value_width$} {u}", format!("{m}:"), v, width = width + 1))
        .map(|line| line.trim_end().to_string() + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn megabytes_prints_whole_numbers_plainly() {
        assert_eq!(megabytes(402_653_184), "384");
        assert_eq!(megabytes(3 << 19), "1.50");
    }

    #[test]
    fn table_aligns_columns() {
        let t = table(&[
            ("a".into(), "1".into(), "B".into()),
            ("longer".into(), "200".into(), "".into()),
        ]);
        assert_eq!(t, "a:         1 B\nlonger:  200\n");
    }
}
