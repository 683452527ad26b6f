"""Layout analysis from scratch on synthetic pages.

Trains the small encoder-decoder net to predict baseline / height / region
maps from rendered two-column pages, then decodes a held-out page into
text-line geometry in column-major reading order.

Run:  python demos/02_layout_analysis.py  (about a minute on a laptop CPU)
"""

import numpy as np

from scriptorium import layout, synth


def main():
    rng = np.random.default_rng(5)
    print("rendering 20 training pages...")
    corpus = []
    for i in range(20):
        cols = synth.random_page_columns(rng, n_columns=2 if i % 3 else 1)
        img, gt = synth.render_page(f"train{i:02d}", cols, scale=3)
        shape = (max(1, round(img.shape[0] / 5)), max(1, round(img.shape[1] / 5)))
        corpus.append((img, layout.rasterize_maps(gt, 5, shape)))

    print("training the layout net (600 iterations)...")
    net, losses = layout.train_layout_net(
        corpus, layout.LayoutTrainConfig(lr=3e-3, iterations=600, batch_size=2))
    print(f"loss: {losses[0]:.2f} -> {np.mean(losses[-10:]):.2f}")

    cols = synth.random_page_columns(np.random.default_rng(1234), n_columns=2)
    img, gt = synth.render_page("heldout", cols, scale=3)
    maps = layout.predict_maps(img, net, page_id="heldout")
    print(f"probability maps at 1/{maps.downsample} resolution: "
          f"{maps.baseline.shape}")

    decoded = layout.decode_baselines(maps, layout.LayoutDecoderConfig())
    print(f"ground truth: {gt.line_count} lines in {len(gt.regions)} regions; "
          f"decoded: {decoded.line_count} lines in {len(decoded.regions)} regions")
    for ri, li, region, line in decoded.iter_lines():
        y = np.mean([p.y for p in line.baseline.points])
        x0 = min(p.x for p in line.baseline.points)
        print(f"  {line.id}: baseline y~{y:5.1f}, starts x={x0:5.1f}, "
              f"asc {line.ascender_height:.1f} desc {line.descender_height:.1f}")


if __name__ == "__main__":
    main()
