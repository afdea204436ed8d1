"""Group, train, checkpoint and evaluate on synthetic data.

Small budget (about 20 s on one core) with tiny 32x32 tiles; raise EPOCHS,
WIDTH or the tile size for a better fit.
"""
import os
import tempfile

from fusenet import data as D
from fusenet.fusion import FusionModelConfig
from fusenet.grouping import group_bands
from fusenet.trainer import TrainConfig, evaluate, load_checkpoint, train

EPOCHS = int(os.environ.get("EPOCHS", 40))
WIDTH = int(os.environ.get("WIDTH", 16))

root = tempfile.mkdtemp()
manifest = D.synth_generate(os.path.join(root, "data"), n_tiles=8, tile_size=32, seed=7)
matrix, grouping = group_bands(D.band_channels(manifest, manifest.split["train"]), seed=7)
print("groups:", grouping.groups)

config = FusionModelConfig(groups=grouping.groups, width=WIDTH, depth=2)
tc = TrainConfig(epochs=EPOCHS, batch_size=4, patch_size=32, learning_rate=3e-3, seed=7)
ck = os.path.join(root, "model.ffn")
result = train(manifest, grouping, config, tc, checkpoint_path=ck, log_path=os.path.join(root, "log.csv"))
for row in result.log[::5] + result.log[-1:]:
    print("epoch %2d  loss %.4f  val OA %.3f" % (row.epoch, row.mean_loss, row.val_oa))

loaded = load_checkpoint(ck)
print("checkpoint:", os.path.getsize(ck), "bytes, step", loaded.optimizer.t)
report, _ = evaluate(loaded, manifest, "val", error_image_dir=os.path.join(root, "errors"))
print(report.to_csv())

# the single-group baseline on the same budget
single = train(manifest, [["B1", "B2", "B3"]], FusionModelConfig(groups=[["B1", "B2", "B3"]], width=WIDTH, depth=2),
               tc, architecture="deepunet")
print("val OA, B1B2B3 only: %.3f" % single.log[-1].val_oa)
