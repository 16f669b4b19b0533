//! Prompt templates and resource files compiled into the library, so a
//! synthetic cohort can be written out self-contained.

use std::path::Path;

use crate::error::{Error, Result};

macro_rules! bundle {
    ($dir:literal: $($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../../../", $dir, "/", $name)))),*]
    };
}

pub const PROMPTS: &[(&str, &str)] = bundle!("prompts":
    "common.reformat.v1.txt",
    "cot.critique.v1.txt",
    "cot.generate.v1.txt",
    "cot.refine.v1.txt",
    "gene.category_report.v1.txt",
    "gene.select_key_genes.v1.txt",
    "gene.summarize.v1.txt",
    "infer.dichotomy.v1.txt",
    "infer.predict_time.v1.txt",
    "wsi.confidence.v1.txt",
    "wsi.describe_patch.v1.txt",
    "wsi.extract_attributes.v1.txt",
    "wsi.global_screen.v1.txt",
    "wsi.summarize.v1.txt",
);

pub const RESOURCES: &[(&str, &str)] = bundle!("resources":
    "category_map.json",
    "gene_kb.json",
    "wsi_checklist.txt",
);

fn write_all(dir: &Path, files: &[(&str, &str)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn write_prompts(dir: &Path) -> Result<()> {
    write_all(dir, PROMPTS)
}

pub fn write_resources(dir: &Path) -> Result<()> {
    write_all(dir, RESOURCES)
}

pub fn resource(name: &str) -> Option<&'static str> {
    RESOURCES.iter().find(|(n, _)| *n == name).map(|(_, b)| *b)
}
