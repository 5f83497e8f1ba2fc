"""Exporter forward agreement.

Exported dense, RNN, and LSTM torch checkpoints must pass the fusion
toolkit's validate command and match the source model's forward pass
within 1e-5 on 10 random inputs. The toolkit is only touched through
its command line and the model file format, never imported.
"""

import json
import subprocess
import sys

import numpy as np
import pytest

pytest.importorskip("mfir_export")
torch = pytest.importorskip("torch")

from mfir_export import export, load_mapping

TORCH_GATE_ORDER = ["input", "forget", "cell", "output"]  # i, f, g, o stacking


def run_cli(*argv):
    return subprocess.run(
        [sys.executable, "-m", "baryfuse", *argv], capture_output=True, text=True
    )


def write_dataset(path, x, seq_shape=None):
    """Inputs as a dataset CSV: one labeled row per sample, sequences
    flattened row-major with their shape on a #seq line."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("#split,test\n")
        if seq_shape is not None:
            f.write(f"#seq,{seq_shape[0]},{seq_shape[1]}\n")
        flat = x.reshape(x.shape[0], -1)
        for row in flat:
            f.write("0," + ",".join(repr(float(v)) for v in row) + "\n")


def toolkit_logits(model_path, data_path, logits_path):
    proc = run_cli("eval", model_path, "--data", data_path, "--logits", logits_path)
    assert proc.returncode == 0, proc.stderr
    return np.loadtxt(logits_path, delimiter=",", ndmin=2)


def check_agreement(tmp_path, tag, out_path, x, torch_logits, seq_shape=None):
    proc = run_cli("validate", out_path)
    assert proc.returncode == 0, proc.stderr
    data_path = str(tmp_path / f"{tag}.csv")
    write_dataset(data_path, x, seq_shape)
    got = toolkit_logits(out_path, data_path, str(tmp_path / f"{tag}_logits.csv"))
    err = float(np.max(np.abs(got - torch_logits)))
    assert err <= 1e-5, f"{tag}: forward disagreement {err:.2e}"
    return err


def save_mapping(tmp_path, tag, data):
    path = str(tmp_path / f"{tag}_map.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
    return load_mapping(path)


def test_criterion_12_exported_checkpoints_match_torch_forward(tmp_path):
    torch.manual_seed(12)
    errs = {}

    # dense: Linear stores (out, in), same layout as the model format
    net = torch.nn.Sequential(
        torch.nn.Linear(4, 8), torch.nn.ReLU(), torch.nn.Linear(8, 3)
    )
    ck = str(tmp_path / "dense.pt")
    torch.save(net.state_dict(), ck)
    mapping = save_mapping(
        tmp_path,
        "dense",
        {
            "arch": "mlp",
            "input_dim": 4,
            "layers": [{"kind": "dense"}, {"kind": "dense"}],
            "tensors": {
                "0.weight": {"layer": 0, "role": "weight"},
                "0.bias": {"layer": 0, "role": "bias"},
                "2.weight": {"layer": 1, "role": "weight"},
                "2.bias": {"layer": 1, "role": "bias"},
            },
        },
    )
    out = str(tmp_path / "dense.mfir")
    export(ck, out, mapping)
    x = np.random.default_rng(120).normal(size=(10, 4))
    with torch.no_grad():
        want = net(torch.as_tensor(x, dtype=torch.float32)).numpy()
    errs["dense"] = check_agreement(tmp_path, "dense", out, x, want)

    # rnn: torch keeps two bias vectors that act as one sum
    rnn = torch.nn.RNN(3, 6, batch_first=True)
    head = torch.nn.Linear(6, 2)
    state = {f"rnn.{k}": v for k, v in rnn.state_dict().items()}
    state.update({f"head.{k}": v for k, v in head.state_dict().items()})
    ck = str(tmp_path / "rnn.pt")
    torch.save(state, ck)
    mapping = save_mapping(
        tmp_path,
        "rnn",
        {
            "arch": "rnn",
            "input_dim": 3,
            "layers": [{"kind": "rnn"}, {"kind": "dense"}],
            "tensors": {
                "rnn.weight_ih_l0": {"layer": 0, "role": "input_weight"},
                "rnn.weight_hh_l0": {"layer": 0, "role": "hidden_weight"},
                "rnn.bias_ih_l0": {"layer": 0, "role": "bias", "rule": "add"},
                "rnn.bias_hh_l0": {"layer": 0, "role": "bias", "rule": "add"},
                "head.weight": {"layer": 1, "role": "weight"},
                "head.bias": {"layer": 1, "role": "bias"},
            },
        },
    )
    out = str(tmp_path / "rnn.mfir")
    export(ck, out, mapping)
    x = np.random.default_rng(121).normal(size=(10, 7, 3))
    with torch.no_grad():
        _, h_n = rnn(torch.as_tensor(x, dtype=torch.float32))
        want = head(h_n[0]).numpy()
    errs["rnn"] = check_agreement(tmp_path, "rnn", out, x, want, seq_shape=(7, 3))

    # lstm: gates stacked along the first axis in torch's i, f, g, o order
    lstm = torch.nn.LSTM(2, 5, batch_first=True)
    head = torch.nn.Linear(5, 2)
    state = {f"lstm.{k}": v for k, v in lstm.state_dict().items()}
    state.update({f"head.{k}": v for k, v in head.state_dict().items()})
    ck = str(tmp_path / "lstm.pt")
    torch.save(state, ck)
    mapping = save_mapping(
        tmp_path,
        "lstm",
        {
            "arch": "lstm",
            "input_dim": 2,
            "layers": [{"kind": "lstm"}, {"kind": "dense"}],
            "tensors": {
                "lstm.weight_ih_l0": {
                    "layer": 0,
                    "role": "input_weight",
                    "gate_order": TORCH_GATE_ORDER,
                },
                "lstm.weight_hh_l0": {
                    "layer": 0,
                    "role": "hidden_weight",
                    "gate_order": TORCH_GATE_ORDER,
                },
                "lstm.bias_ih_l0": {
                    "layer": 0,
                    "role": "bias",
                    "rule": "add",
                    "gate_order": TORCH_GATE_ORDER,
                },
                "lstm.bias_hh_l0": {
                    "layer": 0,
                    "role": "bias",
                    "rule": "add",
                    "gate_order": TORCH_GATE_ORDER,
                },
                "head.weight": {"layer": 1, "role": "weight"},
                "head.bias": {"layer": 1, "role": "bias"},
            },
        },
    )
    out = str(tmp_path / "lstm.mfir")
    export(ck, out, mapping)
    x = np.random.default_rng(122).normal(size=(10, 5, 2))
    with torch.no_grad():
        _, (h_n, _) = lstm(torch.as_tensor(x, dtype=torch.float32))
        want = head(h_n[0]).numpy()
    errs["lstm"] = check_agreement(tmp_path, "lstm", out, x, want, seq_shape=(5, 2))

    worst = max(errs.values())
    print(
        f"PASS 12: exported dense/rnn/lstm checkpoints validate and match "
        f"torch forward on 10 inputs (worst {worst:.2e} <= 1e-5)"
    )
