//! On-disk dataset trees: `<root>/<domain>/<class>/<index>.ppm` plus a
//! tab-separated manifest.

use std::fs;
use std::path::Path;

use sre_core::data::{Dataset, Sample};
use sre_core::image::RasterImage;
use sre_core::{Error, Result};

use crate::synth::{self, DatasetSpec};

pub const MANIFEST: &str = "manifest.tsv";
const HEADER: &str = "path\tdomain\tclass\tlabel";

/// Renders and writes the dataset, returning the manifest row count.
/// A non-empty `root` is refused unless `force` is set.
pub fn write_tree(root: &Path, spec: &DatasetSpec, seed: u64, force: bool) -> Result<usize> {
    spec.validate()?;
    if root.exists() && fs::read_dir(root)?.next().is_some() {
        if !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                root.display()
            )));
        }
        fs::remove_dir_all(root)?;
    }
    let images = synth::generate(spec, seed)?;
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    for g in &images {
        let domain = &spec.domains[g.domain].name;
        let class = &spec.classes[g.label];
        let rel = format!("{domain}/{class}/{:04}.ppm", g.index);
        let path = root.join(&rel);
        fs::create_dir_all(path.parent().expect("nested path"))?;
        g.image.write_ppm(&path)?;
        manifest.push_str(&format!("{rel}\t{domain}\t{class}\t{}\n", g.label));
    }
    fs::write(root.join(MANIFEST), manifest)?;
    Ok(images.len())
}

/// Dataset straight from the generator, using the file quantization so
/// results match a written-and-reloaded tree.
pub fn in_memory(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    let images = synth::generate(spec, seed)?;
    let samples = images
        .into_iter()
        .map(|g| Sample {
            id: format!(
                "{}/{}/{:04}.ppm",
                spec.domains[g.domain].name, spec.classes[g.label], g.index
            ),
            image: g.image.quantize(),
            label: g.label,
            domain: g.domain,
        })
        .collect();
    Ok(Dataset {
        class_names: spec.classes.clone(),
        domain_names: spec.domains.iter().map(|d| d.name.clone()).collect(),
        samples,
    })
}

/// Reads a tree written by [`write_tree`]. Domains and classes are
/// numbered in order of first appearance in the manifest.
pub fn load(root: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(root.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Input("manifest header missing".into()));
    }
    let mut ds = Dataset {
        class_names: Vec::new(),
        domain_names: Vec::new(),
        samples: Vec::new(),
    };
    for (n, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Input(format!("manifest line {}: expected 4 columns", n + 2)));
        }
        let label: usize = cols[3]
            .parse()
            .map_err(|_| Error::Input(format!("manifest line {}: bad label", n + 2)))?;
        let class = position_or_push(&mut ds.class_names, cols[2]);
        if class != label {
            return Err(Error::Input(format!("manifest line {}: label {label} disagrees with class order", n + 2)));
        }
        let domain = position_or_push(&mut ds.domain_names, cols[1]);
        ds.samples.push(Sample {
            image: RasterImage::read_ppm(root.join(cols[0]))?,
            label,
            domain,
            id: cols[0].to_string(),
        });
    }
    if ds.samples.is_empty() {
        return Err(Error::Input("empty manifest".into()));
    }
    Ok(ds)
}

fn position_or_push(v: &mut Vec<String>, s: &str) -> usize {
    match v.iter().position(|x| x == s) {
        Some(i) => i,
        None => {
            v.push(s.to_string());
            v.len() - 1
        }
    }
}
