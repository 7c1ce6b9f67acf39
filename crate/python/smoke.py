"""Smoke test for the soctrace Python bindings.

Build first:  pip install --no-build-isolation ./crates/py   (or `maturin develop -m crates/py/Cargo.toml`)
"""

import soctrace_py as st

fs = st.FlowSet.bundled()
assert "mem_write" in fs.templates()
print(f"{len(fs)} concrete flows, {len(fs.links())} traced links")

trace, truth = st.simulate(fs, seed=7, budget=4)
assert len(trace) > 0
assert st.Trace.parse(trace.to_text()).to_text() == trace.to_text()

full = st.Mask.from_strategy(fs, "S1")
report = st.analyze(fs, trace, full)
m = report["metrics"]
print(f"S1: {full.bit_count()} bits, peak {m['peak']}, final {m['final']}")
assert m["final"] == 1 and m["halt_step"] == -1

weak = st.Mask.from_strategy(fs, "S4+us")
assert weak.bit_count() < full.bit_count()
report = st.analyze(fs, trace, weak, level=1)
assert report["metrics"]["halt_step"] == -1

bad, _ = st.simulate(fs, seed=7, budget=4, templates=["mem_write"], inject="swap:CPU_0:Cache_0:wr_req=Cache_0:CPU_0:rd_resp@1")
report = st.analyze(fs, bad, full)
print(f"corrupted trace halts at step {report['metrics']['halt_step']}")
assert report["metrics"]["halt_step"] >= 0

print("smoke test passed")
