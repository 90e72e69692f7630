use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyModule>)>(f: F) {
    pyo3::append_to_inittab!(learnkt);
    Python::initialize();
    Python::attach(|py| {
        let m = py.import("learnkt").unwrap();
        f(py, &m);
    });
}

use learnkt::learnkt;

#[test]
fn module_round_trip() {
    with_module(|py, m| {
        let reg: Vec<String> = m.call_method0("registry").unwrap().extract().unwrap();
        assert!(reg.contains(&"bkt".to_string()));
        let grid: usize = m.call_method0("default_grid_size").unwrap().extract().unwrap();
        assert_eq!(grid, 1296);

        let pair = m.call_method1("simulate", ("bkt-process", "20x3x4", 5u64)).unwrap();
        let ds = pair.get_item(0).unwrap();
        let n: usize = ds.len().unwrap();
        assert_eq!(n, 240);

        let settings = PyDict::new(py);
        settings.set_item("n_trees", 5).unwrap();
        let model = m.getattr("Model").unwrap().call1(("gbt", settings)).unwrap();
        let rep = model.call_method1("cross_validate", (&ds, 3usize, 1u64)).unwrap();
        let folds: Vec<f64> = rep.get_item("fold_rmse").unwrap().extract().unwrap();
        assert_eq!(folds.len(), 3);

        let err = m.getattr("Model").unwrap().call1(("nope",)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
    });
}
