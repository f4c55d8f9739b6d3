"""Experiment grid, table rendering determinism, and curve figures."""

import json
import random

import pytest

from sonarssl.reporting import (
    Cell,
    CellKey,
    ExperimentGrid,
    ablation_table,
    cell_from_probe_result,
    data_scalability,
    load_metric_series,
    method_comparison,
    model_comparison,
    render_curves,
    resolve_run_provenance,
    write_report,
)


def make_cell(method="sigreg", arch="vit_tiny", data_mode="real",
              task="3class", variant="default", mean=0.8, std=0.01,
              config_hash="h0", source="probe.json"):
    return Cell(key=CellKey(method, arch, data_mode, task, variant),
                mean=mean, std=std, n_seeds=10, config_hash=config_hash,
                source=source)


def demo_cells():
    cells = []
    scores = {("sigreg", "real", "3class"): 0.80,
              ("sigreg", "real", "binary"): 0.86,
              ("sigreg", "real_plus_syn", "3class"): 0.821,
              ("sigreg", "real_plus_syn", "binary"): 0.875,
              ("vicreg", "real", "3class"): 0.77,
              ("vicreg", "real", "binary"): 0.84,
              ("vicreg", "real_plus_syn", "3class"): 0.79,
              ("vicreg", "real_plus_syn", "binary"): 0.85,
              ("simclr", "real", "3class"): 0.75,
              ("simclr", "real", "binary"): 0.83,
              ("simclr", "real_plus_syn", "3class"): 0.77,
              ("simclr", "real_plus_syn", "binary"): 0.845}
    for (method, mode, task), mean in scores.items():
        cells.append(make_cell(method=method, data_mode=mode, task=task,
                               mean=mean, source=f"{method}_{mode}_{task}.json"))
    return cells


class TestExperimentGrid:
    def test_add_and_get(self):
        grid = ExperimentGrid()
        cell = make_cell()
        grid.add(cell)
        assert grid.get(cell.key) == cell
        assert grid.get(CellKey("x", "y", "z", "w")) is None
        assert len(grid) == 1

    def test_duplicate_key_rejected(self):
        grid = ExperimentGrid()
        grid.add(make_cell())
        with pytest.raises(ValueError, match="duplicate cell"):
            grid.add(make_cell(mean=0.9))

    def test_duplicate_with_different_hash_names_both(self):
        grid = ExperimentGrid()
        grid.add(make_cell(config_hash="aaa"))
        with pytest.raises(ValueError, match="aaa.*bbb"):
            grid.add(make_cell(config_hash="bbb"))

    def test_cells_sorted_canonically(self):
        cells = demo_cells()
        random.Random(3).shuffle(cells)
        grid = ExperimentGrid()
        for c in cells:
            grid.add(c)
        ordered = [c.key for c in grid.cells()]
        assert ordered == sorted(ordered, key=lambda k: (
            k.method, k.arch, k.data_mode, k.task, k.variant))

    def test_save_load_round_trip(self, tmp_path):
        grid = ExperimentGrid()
        for c in demo_cells():
            grid.add(c)
        grid.save(tmp_path / "grid.json")
        loaded = ExperimentGrid.load(tmp_path / "grid.json")
        assert loaded.cells() == grid.cells()

    def test_load_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x.json").write_text(json.dumps({"format": "nope"}))
        with pytest.raises(ValueError):
            ExperimentGrid.load(tmp_path / "x.json")


class TestCellFromProbeResult:
    def test_extracts_aggregate(self):
        doc = {"aggregate": {"test_f1": {"mean": 0.82, "std": 0.02, "n": 10}},
               "probe_config": {"task": "binary"},
               "config_hash": "cafe"}
        cell = cell_from_probe_result(doc, "r.json", method="sigreg",
                                      arch="toy_conv", data_mode="real")
        assert cell.key == CellKey("sigreg", "toy_conv", "real", "binary")
        assert cell.mean == 0.82
        assert cell.n_seeds == 10
        assert cell.config_hash == "cafe"


class TestTables:
    def grid(self):
        grid = ExperimentGrid()
        for c in demo_cells():
            grid.add(c)
        return grid

    def test_method_comparison_shape(self):
        table = method_comparison(self.grid(), "vit_tiny", "real")
        assert table.columns == ["method", "3class", "binary"]
        assert [r[0] for r in table.rows] == ["sigreg", "simclr", "vicreg"]

    def test_best_per_column_marked(self):
        table = method_comparison(self.grid(), "vit_tiny", "real")
        by_method = {r[0]: r for r in table.rows}
        assert by_method["sigreg"][1].endswith(" *")
        assert by_method["sigreg"][2].endswith(" *")
        assert not by_method["vicreg"][1].endswith("*")

    def test_tied_best_marks_all(self):
        grid = ExperimentGrid()
        grid.add(make_cell(method="a", mean=0.8))
        grid.add(make_cell(method="b", mean=0.8))
        table = method_comparison(grid, "vit_tiny", "real")
        assert all(row[1].endswith(" *") for row in table.rows)

    def test_missing_cell_stays_blank(self):
        grid = ExperimentGrid()
        grid.add(make_cell(method="a", task="3class"))
        grid.add(make_cell(method="b", task="3class"))
        grid.add(make_cell(method="b", task="binary", mean=0.9))
        table = method_comparison(grid, "vit_tiny", "real")
        by_method = {r[0]: r for r in table.rows}
        assert by_method["a"][2] == ""
        assert by_method["b"][2] != ""

    def test_mixed_config_hash_rejected_naming_cell(self):
        grid = ExperimentGrid()
        grid.add(make_cell(method="a", config_hash="h1"))
        grid.add(make_cell(method="b", config_hash="h2"))
        with pytest.raises(ValueError, match="mixed probe configs"):
            method_comparison(grid, "vit_tiny", "real")
        with pytest.raises(ValueError, match="h2"):
            method_comparison(grid, "vit_tiny", "real")

    def test_empty_selection_rejected(self):
        with pytest.raises(ValueError, match="no cells"):
            method_comparison(self.grid(), "resnet", "real")

    def test_model_comparison(self):
        grid = ExperimentGrid()
        grid.add(make_cell(arch="vit_tiny", mean=0.8))
        grid.add(make_cell(arch="toy_conv", mean=0.7))
        table = model_comparison(grid, "sigreg", "real")
        assert table.columns[0] == "arch"
        assert [r[0] for r in table.rows] == ["toy_conv", "vit_tiny"]
        assert table.rows[1][1].endswith(" *")

    def test_ablation_table(self):
        grid = ExperimentGrid()
        for w, mean in (("w=0.0", 0.5), ("w=0.1", 0.8), ("w=0.5", 0.75)):
            grid.add(make_cell(variant=w, mean=mean))
        table = ablation_table(grid, "sigreg", "vit_tiny", "real")
        assert [r[0] for r in table.rows] == ["w=0.0", "w=0.1", "w=0.5"]
        assert table.rows[1][1].endswith(" *")

    def test_csv_and_text_render(self):
        table = method_comparison(self.grid(), "vit_tiny", "real")
        csv_text = table.to_csv()
        assert csv_text.splitlines()[0] == "method,3class,binary"
        text = table.to_text()
        assert text.startswith("Method comparison (vit_tiny, real)\n")
        assert "-" * len("method") in text


class TestDataScalability:
    def grid(self):
        grid = ExperimentGrid()
        for c in demo_cells():
            grid.add(c)
        return grid

    def test_delta_row_in_points(self):
        table = data_scalability(self.grid(), "sigreg", "vit_tiny")
        delta = table.rows[-1]
        assert delta[0].startswith("Δ")
        assert delta[1] == "+2.1"   # (0.821 - 0.80) * 100
        assert delta[2] == "+1.5"   # (0.875 - 0.86) * 100

    def test_negative_delta_keeps_sign(self):
        grid = ExperimentGrid()
        grid.add(make_cell(data_mode="real", mean=0.82))
        grid.add(make_cell(data_mode="real_plus_syn", mean=0.81))
        table = data_scalability(grid, "sigreg", "vit_tiny")
        assert table.rows[-1][1] == "-1.0"

    def test_no_delta_when_mode_missing(self):
        grid = ExperimentGrid()
        grid.add(make_cell(data_mode="real_plus_syn", mean=0.82))
        table = data_scalability(grid, "sigreg", "vit_tiny")
        assert not any(r[0].startswith("Δ") for r in table.rows)


class TestDeterminism:
    def test_shuffled_insertion_byte_identical(self, tmp_path):
        outputs = []
        for ordering_seed in (1, 2):
            cells = demo_cells()
            random.Random(ordering_seed).shuffle(cells)
            grid = ExperimentGrid()
            for c in cells:
                grid.add(c)
            out = tmp_path / f"report{ordering_seed}"
            files = write_report(grid, out)
            outputs.append({f.name: f.read_bytes() for f in files})
        assert outputs[0].keys() == outputs[1].keys()
        for name in outputs[0]:
            assert outputs[0][name] == outputs[1][name], name

    def test_report_contents(self, tmp_path):
        grid = ExperimentGrid()
        for c in demo_cells():
            grid.add(c)
        files = write_report(grid, tmp_path)
        names = {f.name for f in files}
        assert "methods_vit_tiny_real.csv" in names
        assert "methods_vit_tiny_real_plus_syn.csv" in names
        assert "data_sigreg_vit_tiny.csv" in names
        assert "summary.txt" in names
        assert "grid.json" in names
        summary = (tmp_path / "summary.txt").read_text()
        assert "sigreg" in summary and "probe.json" not in summary


class TestProvenance:
    def test_resolves_snapshot_next_to_checkpoint(self, tmp_path):
        run = tmp_path / "run"
        (run / "checkpoints").mkdir(parents=True)
        snapshot = {"format": "sonarssl-run-config",
                    "pretrain_config": {"objective": "sigreg",
                                        "arch": "toy_conv",
                                        "data_mode": "real_plus_syn"}}
        (run / "config.json").write_text(json.dumps(snapshot))
        for ckpt in (run / "encoder_last.pt",
                     run / "checkpoints" / "epoch_0001.pt"):
            ckpt.write_bytes(b"")
            info = resolve_run_provenance(ckpt)
            assert info["method"] == "sigreg"
            assert info["arch"] == "toy_conv"
            assert info["data_mode"] == "real_plus_syn"

    def test_missing_snapshot_is_an_error(self, tmp_path):
        ckpt = tmp_path / "enc.pt"
        ckpt.write_bytes(b"")
        with pytest.raises(FileNotFoundError, match="config.json"):
            resolve_run_provenance(ckpt)


class TestCurves:
    def test_png_bytes_deterministic(self, tmp_path):
        series = {"run_a": ([0, 1, 2, 3], [1.0, 0.8, 0.7, 0.65]),
                  "run_b": ([0, 1, 2, 3], [1.1, 0.9, 0.8, 0.75])}
        p1 = render_curves(series, tmp_path / "a.png", title="loss")
        p2 = render_curves(series, tmp_path / "b.png", title="loss")
        b1, b2 = p1.read_bytes(), p2.read_bytes()
        assert b1 == b2
        assert b1[:8] == b"\x89PNG\r\n\x1a\n"

    def test_rejects_empty(self, tmp_path):
        with pytest.raises(ValueError):
            render_curves({}, tmp_path / "x.png")

    def test_load_metric_series(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        lines = [json.dumps({"step": s, "loss_total": 1.0 / (s + 1)})
                 for s in range(5)]
        path.write_text("\n".join(lines) + "\n")
        steps, values = load_metric_series(path)
        assert steps == list(range(5))
        assert values[0] == 1.0
        with pytest.raises(ValueError):
            load_metric_series(path, key="missing_metric")
