"""Smoke test for the smmini extension module.

Build and install first:

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import os
import tempfile

import smmini


def main():
    rec = smmini.parse_record('{"instruction": "What is 2+2?", "input": "", "output": "4"}')
    prompt = smmini.render_prompt(rec)
    assert prompt.full_text == "Question: What is 2+2? Answer: 4", prompt.full_text
    assert prompt.full_text[prompt.answer_start:] == "4"

    ids = smmini.tokenize("héllo")
    assert smmini.detokenize(ids) == "héllo"

    values = [0.5, -1.25, 3.0, 0.0, 2.2, -0.1]
    q = smmini.quantize(values, block_size=4)
    back = q.dequantize()
    for i, (v, b) in enumerate(zip(values, back)):
        assert abs(v - b) <= q.scales[i // 4] / 2, (v, b)
    levels = smmini.nf4_levels()
    assert levels == sorted(levels) and levels[0] == -1.0

    model_cfg, train_cfg = smmini.default_configs()
    assert (model_cfg["lora_r"], model_cfg["lora_alpha"], train_cfg["learning_rate"]) == (64, 16.0, 2e-4)

    model = smmini.Model(seed=1, d_model=32, n_heads=4, n_layers=2, d_ff=64,
                         max_sequence_length=64, lora_r=4, lora_alpha=8.0)
    model.quantize_base(block_size=32, mode="nf4")
    assert model.is_quantized

    colors = ["red", "blue", "green", "gold"]
    records = [smmini.Record(f"What color is box {i}?", colors[i % 4]) for i in range(16)]
    trained, losses = smmini.train(model, records, sequence_length=64, minibatch_size=4,
                                   max_steps=8, learning_rate=1e-3, seed=3)
    assert len(losses) == 8 and all(l == l for l in losses), losses

    toks = smmini.tokenize("Question: hi")
    merged = trained.merge()
    a, b = trained.forward(toks), merged.forward(toks)
    worst = max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb))
    assert worst < 1e-10, worst

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.bin")
        trained.save(path)
        again = smmini.Model.load(path)
        assert again.forward(toks) == a
        with open(path, "r+b") as f:
            f.write(b"X")
        try:
            smmini.Model.load(path)
        except smmini.SmminiError:
            pass
        else:
            raise AssertionError("corrupt checkpoint loaded")

    items = [{"question": f"What color is box {i}?", "options": colors, "answer_idx": i % 4,
              "dataset": "micro"} for i in range(8)]
    result = smmini.evaluate(trained, items, label="tiny")
    assert result["n_items"] == 8 and len(result["predictions"]) == 8

    text, tsv = smmini.render_report([("tiny", "micro", result["accuracy"])], fixture=True)
    assert "SM70 (Ours)" in text and tsv.splitlines()[1].startswith("MEDQA - USMLE\t57.3\t60.8")

    print("smoke test passed:", f"loss {losses[0]:.3f} -> {losses[-1]:.3f},",
          f"accuracy {result['accuracy']}")


if __name__ == "__main__":
    main()
