"""Quick end-to-end check of the Python bindings.

    pip install --no-build-isolation -e crates/python
    python3 crates/python/python/smoke_test.py
"""

import learnkt


def main():
    assert "gbt" in learnkt.registry()
    assert learnkt.default_grid_size() == 1296
    assert learnkt.format_cell(0.4304, 0.0041) == "0.430_{0.004}"
    assert abs(learnkt.rmse([1.0, 0.0], [0.0, 0.0]) - 0.5 ** 0.5) < 1e-12

    ds, truth = learnkt.simulate("bkt-process", "40x4x5", seed=3)
    print(ds)
    summary = ds.summary()
    assert summary["meta"]["n_learners"] == 40, summary

    for name in ["bkt", "pfa", "gbt"]:
        model = learnkt.Model(name)
        rep = model.cross_validate(ds, k=5, seed=0)
        print(f"{model.name:>6}  {rep['cell']}")
        assert len(rep["fold_rmse"]) == 5

    fitted = learnkt.Model("bkt", {"max_iter": 50}).fit(ds)
    probs = fitted.predict(ds.keys()[:10])
    assert all(0.0 <= p <= 1.0 for p in probs)
    assert isinstance(fitted.export(), dict)

    llm = learnkt.llm_cross_validate(ds, k=5, seed=0, repeats=2)
    print("   LLM ", llm["cell"])

    small = learnkt.Dataset.from_records(
        [("a", "q1", 1, True), ("a", "q1", 2, False), ("b", "q1", 1, None)]
    )
    assert len(small) == 3 and small.n_labeled == 2

    try:
        learnkt.Model("nope")
    except ValueError as e:
        assert "available" in str(e)
    else:
        raise AssertionError("unknown model accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
