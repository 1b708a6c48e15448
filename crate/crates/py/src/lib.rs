use pyo3::prelude::*;

#[pymodule]
fn uasr(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
