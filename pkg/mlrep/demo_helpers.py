"""
Console Helper Functions
========================

Formatted console output for the CLI and the pipeline demonstration:
section and step headers, status lines, result tables and the interactive
pause between steps.
"""

import time
from typing import Any

import pandas as pd

from mlrep.config import INTERACTIVE_MODE

STEP_DELAY = 0.5


def print_section_header(title: str):
    """Print a major section header"""
    print("\n" + "=" * 80)
    print(f"  {title}")
    print("=" * 80)


def print_step_header(step_num: int, title: str, verb: str = ""):
    """Print a step header with the matching CLI verb as a badge"""
    print("\n" + "-" * 80)
    verb_badge = f" [{verb}]" if verb else ""
    print(f"STEP {step_num}: {title}{verb_badge}")
    print("-" * 80)


def print_success(message: str):
    print(f"✓ {message}")


def print_warning(message: str):
    print(f"⚠️  {message}")


def print_error(message: str):
    print(f"❌ {message}")


def print_info(message: str):
    print(f"   {message}")


def print_table(frame: pd.DataFrame, title: str = ""):
    """Print a report frame without its index"""
    if title:
        print(f"\n📊 {title}")
    print(frame.to_string(index=False))


def format_shape_chain(chain: Any) -> str:
    """
    One line per encoder stage: input -> conv -> pooled

    Args:
        chain: ShapeChain of a built model
    """
    lines = [f"   input        {chain.input_dims[0]} x {chain.input_dims[1]}"]
    for stage in chain.encoder:
        lines.append(
            f"   {stage.name:<12} {stage.conv_input[0]} x {stage.conv_input[1]}"
            f" -> conv {stage.conv_output[0]} x {stage.conv_output[1]}"
            f" -> pool {stage.output[0]} x {stage.output[1]}"
        )
    channels, height, width = chain.code_dims
    lines.append(f"   code         {channels} x {height} x {width} (K = {chain.code_size})")
    return "\n".join(lines)


def format_metrics(report: Any) -> str:
    lines = [f"   • {task}: Acc2 {m.accuracy:.4f}, weighted F1 {m.weighted_f1:.4f} (n = {m.confusion.total})"
             for task, m in report.tasks.items()]
    if len(report.tasks) > 1:
        lines.append(f"   • mean: Acc2 {report.mean_accuracy:.4f}, weighted F1 {report.mean_f1:.4f}")
    return "\n".join(lines)


def wait_for_user(message: str = "Press ENTER to continue to next step"):
    """Wait for user input if interactive mode is enabled"""
    if INTERACTIVE_MODE:
        input(f"\n⏸️  {message}... ")
    else:
        time.sleep(STEP_DELAY)
