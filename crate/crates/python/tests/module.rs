use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

fn with_module(f: impl FnOnce(&Bound<'_, PyModule>) -> PyResult<()>) {
    Python::attach(|py| {
        let m = wrap_pymodule!(pyrdfcil::pyrdfcil)(py);
        f(m.bind(py).cast::<PyModule>().unwrap()).unwrap();
    });
}

#[test]
fn factors_cross_the_boundary() {
    with_module(|m| {
        let d = m.getattr("adaptive_factors")?.call1((10, 2))?;
        let d = d.cast::<PyDict>()?;
        let alpha: f64 = d.get_item("alpha")?.unwrap().extract()?;
        assert_eq!(alpha, 1.0);
        Ok(())
    });
}

#[test]
fn loss_returns_value_and_gradient() {
    with_module(|m| {
        let t = vec![vec![1.0, 2.0], vec![0.0, -1.0]];
        let s = vec![vec![1.5, 2.0], vec![0.0, 0.0]];
        let (v, g): (f64, Vec<Vec<f64>>) = m.getattr("hkd_loss")?.call1((t, s))?.extract()?;
        assert_eq!(v, 1.5 / 4.0);
        assert_eq!(g, vec![vec![0.25, 0.0], vec![0.0, 0.25]]);
        Ok(())
    });
}

#[test]
fn bad_override_raises_config_error() {
    with_module(|m| {
        let cfg = m.getattr("Config")?;
        let kwargs = PyDict::new(m.py());
        kwargs.set_item("overrides", vec!["trainer.bogus=1"])?;
        let err = cfg.call_method("load", (), Some(&kwargs)).unwrap_err();
        assert!(err.is_instance(m.py(), &m.getattr("ConfigError")?));
        Ok(())
    });
}

#[test]
fn schedules_and_models() {
    with_module(|m| {
        let s = m.getattr("TaskSchedule")?.call_method1("split_equal", (10, 5, 0))?;
        let sizes: Vec<usize> = s.getattr("task_sizes")?.extract()?;
        assert_eq!(sizes, vec![2; 5]);
        let kwargs = PyDict::new(m.py());
        kwargs.set_item("input_shape", (8, 8, 3))?;
        kwargs.set_item("widths", (4, 4, 4))?;
        kwargs.set_item("blocks_per_stage", 1)?;
        let model = m.getattr("Model")?.call((2,), Some(&kwargs))?;
        model.call_method1("expand", (2, 0))?;
        let count: usize = model.getattr("class_count")?.extract()?;
        assert_eq!(count, 4);
        let preds: Vec<usize> = model.call_method1("predict", (vec![0.1f32; 2 * 3 * 64], 2))?.extract()?;
        assert_eq!(preds.len(), 2);
        Ok(())
    });
}
