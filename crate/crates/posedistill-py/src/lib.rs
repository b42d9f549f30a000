use pyo3::prelude::*;

#[pymodule]
fn posedistill_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
