use std::path::{Path, PathBuf};

use anyhow::Context;
use cdscope::emd::{emd, normalize};
use clap::Args;
use ndarray::Array2;

use crate::config::invalid;

/// Print the EMD between two square grids given as headerless CSV.
#[derive(Debug, Args)]
pub struct Emd {
    pub a: PathBuf,
    pub b: PathBuf,
}

impl Emd {
    pub fn run(&self) -> anyhow::Result<()> {
        let a = normalized(&self.a)?;
        let b = normalized(&self.b)?;
        println!("{}", emd(&a, &b)?);
        Ok(())
    }
}

fn normalized(path: &Path) -> anyhow::Result<cdscope::emd::GridDistribution> {
    let grid = read_grid(path)?;
    normalize(grid.view())
        .with_context(|| path.display().to_string())?
        .ok_or_else(|| invalid(format!("{}: grid has no mass", path.display())))
}

pub fn read_grid(path: &Path) -> anyhow::Result<Array2<f64>> {
    if !path.is_file() {
        return Err(invalid(format!("no such file {}", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut cells = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        rows += 1;
        if *width.get_or_insert(record.len()) != record.len() {
            return Err(invalid(format!(
                "{}: row {rows} has a different length",
                path.display()
            )));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| invalid(format!("{}: row {rows}: {field:?} is not a number", path.display())))?;
            cells.push(v);
        }
    }
    let cols = width.ok_or_else(|| invalid(format!("{}: empty grid", path.display())))?;
    if cols != rows {
        return Err(invalid(format!(
            "{}: grid must be square, got {rows}x{cols}",
            path.display()
        )));
    }
    Ok(Array2::from_shape_vec((rows, cols), cells).expect("rows * cols cells"))
}
