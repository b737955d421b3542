use pyo3::prelude::*;

#[pymodule]
fn ringlight_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
