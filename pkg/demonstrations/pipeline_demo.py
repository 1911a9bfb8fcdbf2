#!/usr/bin/env python3
"""
Multimodal Autoencoder Pipeline Demonstration
=============================================

Walks through the whole unsupervised representation pipeline on a small
synthetic corpus:
- Word-level alignment of frame features
- Matrix assembly and two-step normalization
- Autoencoder shape chain and parameter count
- Pretraining with validation-driven early stopping
- Frozen-encoder embeddings and logistic-regression scoring

Key Learning Points:
--------------------
1. Every modality is averaged over word intervals before concatenation
2. Scalers are fit on train splits only and travel with the weights file
3. The code size K follows from the input width, never from a setting
4. Labels are used only by the downstream classifier

Usage:
------
    python demonstrations/pipeline_demo.py

Set MLREP_INTERACTIVE_MODE=true to pause between steps.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

# Add parent directory to path to allow importing mlrep package
current_dir = Path(__file__).parent
parent_dir = current_dir.parent
if str(parent_dir) not in sys.path:
    sys.path.insert(0, str(parent_dir))

from mlrep import (
    CAEArchitecture,
    CsvReporter,
    RawModalityTrack,
    SynthConfig,
    TrainConfig,
    WordIntervals,
    build_utterance_matrix,
    count_parameters,
    load_weights,
    save_weights,
    synth_generate,
)
from mlrep.demo_helpers import (
    format_metrics,
    format_shape_chain,
    print_error,
    print_info,
    print_section_header,
    print_step_header,
    print_success,
    print_table,
    wait_for_user,
)
from mlrep.experiments import DatasetRef, RunConfig, embed_dataset, pretrain, train_eval_classifier

DEMO_WIDTHS = {'audio': 8, 'vision': 6, 'text': 16}


class PipelineDemo:
    """Step-by-step run of the pipeline on an in-memory synthetic corpus"""

    def __init__(self, n_utterances: int = 400, seed: int = 0):
        self.synth_config = SynthConfig(n_utterances=n_utterances, modality_widths=dict(DEMO_WIDTHS),
                                        seed=seed, name='demo')
        self.run_config = RunConfig(
            datasets=(DatasetRef('demo'),),
            train=TrainConfig(batch_size=32, max_epochs=15, early_stop_patience=4),
            seed=seed,
        )
        self.workdir = Path(tempfile.mkdtemp(prefix='mlrep-demo-'))
        self.splits = None
        self.result = None

    def step_1_word_alignment(self):
        print_step_header(1, "Word-level alignment", "synth")
        words = WordIntervals.from_pairs([(0.0, 0.5), (0.5, 1.0)])
        audio = RawModalityTrack.from_frames([(0.0, 0.25, [1.0]), (0.25, 0.5, [3.0]), (0.5, 1.0, [5.0])], width=1)
        text = RawModalityTrack.from_frames([(0.0, 0.5, [1.0, 0.0]), (0.5, 1.0, [0.0, 1.0])], width=2)
        matrix = build_utterance_matrix({'audio': audio, 'text': text}, words, n=4)
        print_info("Two words, audio at 4 Hz for the first word, text one vector per word")
        print(matrix)
        print_success("Rows before the first word are zero padding; audio row 3 averages 1 and 3")

    def step_2_synthetic_corpus(self):
        print_step_header(2, "Synthetic corpus", "synth")
        self.splits = synth_generate(self.synth_config)
        for split in self.splits:
            positives = int((split.labels['sentiment'] > 0).sum())
            print_info(f"{split.split:<5} {len(split):>4} utterances, {split.timesteps} x {split.width}, "
                       f"{positives} positive")
        print_success(f"Blocks: {', '.join(f'{name}={width}' for name, width in self.splits[0].blocks)}")

    def step_3_architecture(self):
        print_step_header(3, "Architecture and parameter count", "count-params")
        reporter = CsvReporter()
        reference = count_parameters(CAEArchitecture.reference())
        print_info(f"Reference 20 x 409 input: encoder {reference.encoder_total:,}, "
                   f"decoder {reference.decoder_total:,}")
        small = count_parameters(CAEArchitecture.reference(), (self.splits[0].timesteps, self.splits[0].width))
        print_table(reporter.parameter_frame(small).tail(5), f"Demo input 20 x {self.splits[0].width}")

    def step_4_pretrain(self):
        print_step_header(4, "Autoencoder pretraining", "train-cae")
        train, val, test = self.splits
        loaded = {'demo': {'train': train, 'val': val, 'test': test}}
        self.result = pretrain(self.run_config, loaded)
        print(format_shape_chain(self.result.model.shape_chain))
        print_table(CsvReporter().history_frame(self.result.history), "Training history")
        print_success(f"Best validation MSE {self.result.best_val_mse:.6f}")

    def step_5_weights_round_trip(self):
        print_step_header(5, "Weights file", "embed")
        path = save_weights(self.result.model, self.workdir / 'encoder.mlrw', include_decoder=False)
        restored = load_weights(path)
        code_a = embed_dataset(self.result.model, self.splits[2]).X
        code_b = embed_dataset(restored, self.splits[2]).X
        print_info(f"{path} ({path.stat().st_size:,} bytes)")
        if np.array_equal(code_a, code_b):
            print_success("Restored encoder reproduces the embeddings bit for bit")
        else:
            print_error("Restored encoder differs from the trained one")

    def step_6_downstream(self):
        print_step_header(6, "Downstream logistic regression", "train-clf")
        model = self.result.model
        train_codes = embed_dataset(model, self.splits[0])
        test_codes = embed_dataset(model, self.splits[2])
        classifier, report = train_eval_classifier(train_codes, test_codes)
        print_info(f"Embedding size K = {train_codes.width}, {classifier.parameter_count:,} classifier parameters")
        print(format_metrics(report))

    def run_complete_pipeline(self):
        """Run every step in order"""
        print_section_header("MULTIMODAL AUTOENCODER PIPELINE")
        try:
            self.step_1_word_alignment()
            wait_for_user()
            self.step_2_synthetic_corpus()
            wait_for_user()
            self.step_3_architecture()
            wait_for_user()
            self.step_4_pretrain()
            wait_for_user()
            self.step_5_weights_round_trip()
            wait_for_user()
            self.step_6_downstream()

            print_section_header("SUMMARY")
            print("""
   synth        -> word-aligned 20 x M matrices with labels
   train-cae    -> scalers + autoencoder fit on train, early stopping on val
   embed        -> frozen encoder turns each utterance into K numbers
   train-clf    -> one logistic regression per task, Acc2 and weighted F1
            """)
        except Exception as e:
            print_error(f"\nDemonstration failed: {str(e)}")
            raise


def main():
    """Main entry point"""
    demo = PipelineDemo()
    demo.run_complete_pipeline()


if __name__ == '__main__':
    main()
