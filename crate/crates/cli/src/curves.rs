use std::path::PathBuf;

use clap::Args;
use rrdr_core::param_map::{emit_curves, write_curves_csv};
use rrdr_core::{Result, TargetMeasure};
use serde::{Deserialize, Serialize};

use crate::config::{self, number_list, overlay};
use crate::output::{self, Metadata};

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurvesArgs {
    /// rr or rd.
    #[arg(long)]
    pub measure: Option<TargetMeasure>,
    /// θ values as "a,b,c" or "lo:hi:step".
    #[arg(long, allow_hyphen_values = true)]
    pub thetas: Option<String>,
    /// φ values as "a,b,c" or "lo:hi:step".
    #[arg(long, allow_hyphen_values = true)]
    pub phis: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CurvesConfig {
    measure: TargetMeasure,
    thetas: Vec<f64>,
    phis: Vec<f64>,
}

pub fn run(mut args: CurvesArgs) -> Result<()> {
    let mut file: CurvesArgs = config::load(args.config.as_deref())?;
    overlay!(args, file; measure, thetas, phis, out);
    let cfg = CurvesConfig {
        measure: args.measure.unwrap_or(TargetMeasure::Rr),
        thetas: number_list(args.thetas.as_deref().unwrap_or("-1,-0.5,0,0.5,1"))?,
        phis: number_list(args.phis.as_deref().unwrap_or("-4:4:0.1"))?,
    };
    let rows = emit_curves(cfg.measure, &cfg.thetas, &cfg.phis)?;
    let meta = Metadata::new("curves", None, config::hash(&cfg));
    let dir = output::out_dir(&args.out.unwrap_or_else(|| PathBuf::from(".")))?;
    output::write_with_header(&dir.join("curves.csv"), &meta, |w| write_curves_csv(w, &rows))
}
