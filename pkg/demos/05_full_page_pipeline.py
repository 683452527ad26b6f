"""The whole pipeline on one synthetic two-column page, in memory.

layout maps -> decoded text-line geometry -> rectified crops -> recognizer
-> PAGE XML, Markdown and plain text.  Uses short training runs so the
demo finishes in a few minutes; see the README for the CLI equivalent
(`scriptorium transcribe ...`) once you have trained checkpoints.
"""

import numpy as np

from scriptorium import ctc, layout, metrics, ocrnet, synth, train
from scriptorium.formats import TranscribedPage, emit_markdown, emit_txt
from scriptorium.geometry import rectify_and_crop


def train_models():
    rng = np.random.default_rng(5)
    print("training layout net...")
    pages = []
    for i in range(20):
        cols = synth.random_page_columns(rng, n_columns=2 if i % 3 else 1)
        img, gt = synth.render_page(f"t{i}", cols, scale=3)
        shape = (max(1, round(img.shape[0] / 5)), max(1, round(img.shape[1] / 5)))
        pages.append((img, layout.rasterize_maps(gt, 5, shape)))
    net, _ = layout.train_layout_net(
        pages, layout.LayoutTrainConfig(lr=3e-3, iterations=700, batch_size=2))

    print("training recognizer (800 iterations)...")
    corpus = synth.make_corpus(200, np.random.default_rng(11), scale=4)
    charset = ocrnet.Charset.from_texts(t for _, t in corpus)
    model = ocrnet.init_ocr_model(
        charset, dim=64, blocks=2, heads=4, input_height=64, input_width=256,
        projection=8, conv_spec=ocrnet.compact_conv_spec(64), seed=0)
    cfg = train.TrainConfig(max_lr=1e-3, train_batch=16, val_batch=8,
                            total_iterations=800, image_width=256,
                            image_height=64, seed=0, val_interval=400,
                            base_optimizer="adam")
    result = train.train_loop(model, corpus[:180], corpus[180:], cfg)
    return net, result.model


def main():
    net, model = train_models()

    cols = synth.random_page_columns(np.random.default_rng(77), n_columns=2)
    page_img, gt = synth.render_page("demo-page", cols, scale=3)
    truth = synth.page_text(cols)

    maps = layout.predict_maps(page_img, net, page_id="demo-page")
    decoded = layout.decode_baselines(maps, layout.LayoutDecoderConfig())
    print(f"\ndecoded {decoded.line_count} lines in {len(decoded.regions)} regions")

    texts = {}
    for _, _, _, line in decoded.iter_lines():
        crop = rectify_and_crop(page_img, line, target_height=50, interp_order=2)
        logp, valid = ocrnet.forward_logits(crop, model)
        texts[line.id] = model.charset.decode(ctc.greedy_decode(logp, valid))

    page = TranscribedPage(decoded, texts)
    txt = emit_txt(page)
    print("\n--- emitted Markdown ---")
    print(emit_markdown(page))
    print("--- plain text vs ground truth ---")
    for hyp, ref in zip(txt.split("\n"), truth.split("\n")):
        marker = "  " if hyp == ref else "!="
        print(f"  {ref:10s} {marker} {hyp}")
    print(f"\npage CER: {metrics.cer(truth, txt):.4f}")


if __name__ == "__main__":
    main()
