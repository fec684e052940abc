use std::io::Write;

use rrdr_core::design::{build_design, load_covariates_csv, DesignSpec, INTERCEPT_NAME};
use rrdr_core::load_csv;

fn temp_csv(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

#[test]
fn loads_file_and_builds_interactions() {
    let f = temp_csv("id,y,a,x,g\n1,1,0,0.5,1\n2,0,1,1.5,0\n3,1,1,-2,1\n");
    let data = load_csv(f.path(), "y", "a").unwrap();
    assert_eq!(data.n(), 3);
    assert_eq!(data.covariates().names(), &["id", "x", "g"]);
    let spec = DesignSpec::parse("x, g, x:g", true).unwrap();
    let m = build_design(&data, &spec).unwrap();
    assert_eq!(m.column_names, vec![INTERCEPT_NAME, "x", "g", "x:g"]);
    assert_eq!(m.values.row(2).iter().cloned().collect::<Vec<_>>(), vec![1.0, -2.0, 1.0, -2.0]);
}

#[test]
fn reports_bad_rows_with_position() {
    let f = temp_csv("y,a,x\n1,0,1\n0,1,oops\n");
    let err = load_csv(f.path(), "y", "a").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("row 2") && msg.contains("'x'"), "{msg}");
    let f = temp_csv("y,a,x\n1,3,1\n");
    assert!(load_csv(f.path(), "y", "a").is_err());
    let f = temp_csv("y,x\n1,1\n");
    assert!(load_csv(f.path(), "y", "a").is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_csv("/nonexistent/rrdr.csv", "y", "a").unwrap_err();
    assert_eq!(err.category(), "io");
}

#[test]
fn covariate_only_files_load() {
    let f = temp_csv("x,z\n0,1\n2,3\n");
    let covs = load_covariates_csv(f.path()).unwrap();
    assert_eq!(covs.n(), 2);
    assert_eq!(covs.column("z").unwrap(), &[1.0, 3.0]);
}

#[test]
fn unknown_terms_and_empty_designs_fail() {
    let f = temp_csv("y,a,x\n1,0,1\n0,1,2\n");
    let data = load_csv(f.path(), "y", "a").unwrap();
    assert!(build_design(&data, &DesignSpec::with_intercept(["w"])).is_err());
    assert!(build_design(&data, &DesignSpec::new(Vec::<String>::new(), false)).is_err());
    assert!(DesignSpec::parse("x,:x", true).is_err());
    assert_eq!(DesignSpec::parse("x,,x:x", true).unwrap().terms, vec!["x", "x:x"]);
}
