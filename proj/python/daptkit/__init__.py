"""Domain-adaptive pretraining toolkit.

Thin Python layer over the C++ core: WordPiece vocabularies, masked-LM data,
a small transformer encoder with pretraining and fine-tuning, and the
evaluation metrics and report rendering.
"""

from ._core import (
    DaptkitError,
    ModelState,
    Vocabulary,
    accuracy,
    auc_binary,
    auc_multiclass,
    compare_vocabularies,
    corpus_stats,
    f1,
    fertility,
    finetune,
    forward_mlm,
    ingest,
    init_model,
    load_checkpoint,
    mask_segments,
    mlm_accuracy,
    normalize,
    pack_sequences,
    pre_tokenize,
    predict_logits,
    pretrain,
    report_from_results,
    run_cli,
    save_checkpoint,
    scheduled_lr,
    split,
    split_sentences,
    split_sizes,
    train_vocabulary,
    with_classifier,
)

__version__ = "0.1.0"
