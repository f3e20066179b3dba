use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;

use nmke_core::attribution::{attribution_matrices, write_binary, write_csv};
use nmke_core::math::Mat;
use nmke_core::{Error, Result};

use crate::config::Config;
use crate::manifest::ManifestBuilder;

use super::{ensure_dir, load_model, load_world, status, write_text};

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Bin,
}

fn parse_format(s: &str) -> std::result::Result<ExportFormat, String> {
    match s {
        "csv" => Ok(ExportFormat::Csv),
        "bin" => Ok(ExportFormat::Bin),
        other => Err(format!("unknown format {other:?}; use csv or bin")),
    }
}

#[derive(Args)]
pub struct ExportArgs {
    /// Checkpoint whose tensors to dump.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,

    /// Output directory for the tensor files.
    #[arg(long, value_name = "DIR", default_value = "export-out")]
    pub out_dir: PathBuf,

    /// Tensor file format: csv for external plotting, bin for raw
    /// f32 little-endian payloads.
    #[arg(long, value_name = "FORMAT", default_value = "csv", value_parser = parse_format)]
    pub format: ExportFormat,

    /// World JSON; also exports attribution matrices over its facts.
    #[arg(long, value_name = "FILE")]
    pub world: Option<PathBuf>,

    /// Prompts sampled for the attribution export.
    #[arg(long, default_value_t = 64)]
    pub attr_prompts: usize,
}

fn write_mat_csv(m: &Mat, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    for r in 0..m.rows {
        let row = m.row(r);
        let mut line = String::with_capacity(row.len() * 12);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v:e}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn write_mat_bin(m: &Mat, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    for v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(cfg: &Config, args: &ExportArgs) -> Result<()> {
    let (model, tok) = load_model(&args.model)?;
    ensure_dir(&args.out_dir)?;
    let mut mb = ManifestBuilder::new("export", cfg);
    mb.input(&args.model)?;

    let ext = match args.format {
        ExportFormat::Csv => "csv",
        ExportFormat::Bin => "bin",
    };
    let mut tensors: Vec<(String, &Mat)> = vec![
        ("tok_embedding".into(), &model.tok_embedding),
        ("pos_embedding".into(), &model.pos_embedding),
        ("unembedding".into(), &model.unembedding),
    ];
    for (li, layer) in model.layers.iter().enumerate() {
        tensors.push((format!("layer{li}.w_q"), &layer.w_q));
        tensors.push((format!("layer{li}.w_k"), &layer.w_k));
        tensors.push((format!("layer{li}.w_v"), &layer.w_v));
        tensors.push((format!("layer{li}.w_o"), &layer.w_o));
        tensors.push((format!("layer{li}.w_in"), &layer.w_in));
        tensors.push((format!("layer{li}.w_out"), &layer.w_out));
    }

    let mut index = Vec::with_capacity(tensors.len());
    for (name, mat) in &tensors {
        let path = args.out_dir.join(format!("{name}.{ext}"));
        match args.format {
            ExportFormat::Csv => write_mat_csv(mat, &path)?,
            ExportFormat::Bin => write_mat_bin(mat, &path)?,
        }
        mb.output(&path)?;
        index.push(serde_json::json!({
            "tensor": name,
            "file": format!("{name}.{ext}"),
            "rows": mat.rows,
            "cols": mat.cols,
        }));
    }
    let index_path = args.out_dir.join("index.json");
    write_text(&index_path, &(serde_json::to_string_pretty(&index)? + "\n"))?;
    mb.output(&index_path)?;

    if let Some(world_path) = &args.world {
        let world = load_world(world_path)?;
        mb.input(world_path)?;
        let mut prompts = Vec::new();
        for fact in world.facts.iter().take(args.attr_prompts) {
            let ids = tok.encode(&world.canonical_prompt(fact))?;
            let obj = tok.id(world.object_word(fact))?;
            prompts.push((ids, obj));
        }
        if prompts.is_empty() {
            return Err(Error::Config("world holds no facts to attribute".into()));
        }
        let mats = attribution_matrices(&model, &prompts, &cfg.attribution)?;
        for m in &mats {
            let base = format!("attribution.layer{}", m.layer);
            let path = match args.format {
                ExportFormat::Csv => {
                    let p = args.out_dir.join(format!("{base}.csv"));
                    write_csv(m, &p)?;
                    p
                }
                ExportFormat::Bin => {
                    let p = args.out_dir.join(format!("{base}.attr"));
                    write_binary(m, &p)?;
                    p
                }
            };
            mb.output(&path)?;
        }
        status(&format!(
            "export: attribution over {} prompts at {} layer(s)",
            prompts.len(),
            mats.len()
        ));
    }

    mb.write_into(&args.out_dir)?;
    status(&format!(
        "export: {} tensors as {ext} in {}",
        tensors.len(),
        args.out_dir.display()
    ));
    Ok(())
}
