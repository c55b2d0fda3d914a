#!/usr/bin/env python3
"""
EmoAug MCP Server

MCP server exposing the lightweight planning and evaluation helpers of the
augmentation pipeline: augmentation plans, balancing quotas, session folds,
manifest summaries and WA/UA metrics.

Usage:
    python mcp_server/server.py

Logs go to stderr; stdout carries the MCP stdio transport.
"""

import sys
import json
import logging
import asyncio
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from mcp.server import Server
from mcp.types import Tool, TextContent
import mcp.server.stdio

from src.config import LOG_FORMAT, LOG_LEVEL, EMOTIONS
from src.manifest import read_rows, read_corpus, HEADER_KEY
from src.augment import build_plan, balance_quotas, plan_totals
from src.ser import make_folds, compute_metrics

# =============================================================================
# LOGGING
# =============================================================================

logging.basicConfig(
    level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
    format=LOG_FORMAT,
    stream=sys.stderr,
)
logger = logging.getLogger("emoaug-mcp")

# Plans larger than this are summarized without their rows
MAX_PLAN_ROWS = 500

# =============================================================================
# MCP SERVER
# =============================================================================

server = Server("emoaug")


@server.list_tools()
async def list_tools() -> list[Tool]:
    """Return available tools."""
    return [
        Tool(
            name="build_augmentation_plan",
            description="""Plan a style-transfer augmentation of a corpus manifest.

Each utterance is re-spoken N times in the style of other utterances of the
same speaker and emotion. With balance=true, extra rows bring every
emotion up to the largest class.

Returns per-class totals, balancing quotas, with-replacement counts and
(for small plans) the rows themselves.""",
            inputSchema={
                "type": "object",
                "properties": {
                    "manifest": {
                        "type": "string",
                        "description": "Path of a corpus manifest (.jsonl)"
                    },
                    "n": {
                        "type": "integer",
                        "default": 8,
                        "minimum": 0,
                        "description": "Augmentation times per utterance"
                    },
                    "balance": {
                        "type": "boolean",
                        "default": False,
                        "description": "Add balancing rows for minority emotions"
                    },
                    "seed": {
                        "type": "integer",
                        "default": 0,
                        "description": "Sampling seed"
                    },
                    "include_rows": {
                        "type": "boolean",
                        "default": False,
                        "description": f"Return plan rows (at most {MAX_PLAN_ROWS})"
                    }
                },
                "required": ["manifest"]
            }
        ),
        Tool(
            name="balance_quotas",
            description="""Extra utterances per emotion needed to match the largest class.""",
            inputSchema={
                "type": "object",
                "properties": {
                    "counts": {
                        "type": "object",
                        "additionalProperties": {"type": "integer", "minimum": 0},
                        "description": "emotion -> utterance count, e.g. {\"angry\": 10, \"sad\": 4}"
                    }
                },
                "required": ["counts"]
            }
        ),
        Tool(
            name="make_folds",
            description="""Leave-one-session-out folds for 5 sessions.

Fold i tests on session i, validates on the next session and trains on the
remaining three.""",
            inputSchema={
                "type": "object",
                "properties": {
                    "sessions": {
                        "type": "array",
                        "items": {"type": "integer"},
                        "description": "Exactly 5 distinct session ids"
                    }
                },
                "required": ["sessions"]
            }
        ),
        Tool(
            name="summarize_manifest",
            description="""Summarize a corpus or augmented manifest.

Shows the header (format version, config hash, seed), row count, per-emotion
counts, sessions and speakers, and augmentation methods when present.""",
            inputSchema={
                "type": "object",
                "properties": {
                    "manifest": {
                        "type": "string",
                        "description": "Path of a manifest (.jsonl)"
                    }
                },
                "required": ["manifest"]
            }
        ),
        Tool(
            name="compute_metrics",
            description=f"""Weighted and unweighted accuracy plus the confusion matrix.

Labels are emotion names from {list(EMOTIONS)}.""",
            inputSchema={
                "type": "object",
                "properties": {
                    "y_true": {
                        "type": "array",
                        "items": {"type": "string", "enum": list(EMOTIONS)},
                        "description": "True labels"
                    },
                    "y_pred": {
                        "type": "array",
                        "items": {"type": "string", "enum": list(EMOTIONS)},
                        "description": "Predicted labels, same length"
                    }
                },
                "required": ["y_true", "y_pred"]
            }
        )
    ]


@server.call_tool()
async def call_tool(name: str, arguments: dict) -> list[TextContent]:
    """Execute a tool."""
    logger.info(f"Tool call: {name} with {arguments}")

    try:
        if name == "build_augmentation_plan":
            result = await handle_build_augmentation_plan(arguments)
        elif name == "balance_quotas":
            result = await handle_balance_quotas(arguments)
        elif name == "make_folds":
            result = await handle_make_folds(arguments)
        elif name == "summarize_manifest":
            result = await handle_summarize_manifest(arguments)
        elif name == "compute_metrics":
            result = await handle_compute_metrics(arguments)
        else:
            result = {"error": f"Unknown tool: {name}"}

        return [TextContent(
            type="text",
            text=json.dumps(result, ensure_ascii=False, indent=2)
        )]

    except Exception as e:
        logger.error(f"Tool error: {e}", exc_info=True)
        return [TextContent(
            type="text",
            text=json.dumps({
                "error": str(type(e).__name__),
                "message": str(e)
            }, ensure_ascii=False)
        )]


# =============================================================================
# TOOL HANDLERS
# =============================================================================

async def handle_build_augmentation_plan(args: dict) -> dict:
    """Handle build_augmentation_plan tool."""
    manifest = args.get("manifest")
    if not manifest:
        return {"error": "manifest is required"}

    records = read_corpus(manifest)
    plan = build_plan(records, int(args.get("n", 8)), bool(args.get("balance", False)), int(args.get("seed", 0)))

    result = {
        "manifest": manifest,
        "rows": len(plan),
        "with_replacement": plan.n_with_replacement,
        "quotas": plan.quotas,
        "skipped": plan.skipped,
        "totals": plan_totals(plan, records),
    }
    if args.get("include_rows"):
        if len(plan) > MAX_PLAN_ROWS:
            result["rows_omitted"] = f"plan has more than {MAX_PLAN_ROWS} rows"
        else:
            result["plan"] = [vars(row) for row in plan.rows]
    return result


async def handle_balance_quotas(args: dict) -> dict:
    """Handle balance_quotas tool."""
    counts = args.get("counts")
    if not counts:
        return {"error": "counts is required"}

    if not isinstance(counts, dict):
        return {"error": "counts must be an object"}

    quotas = balance_quotas({k: int(v) for k, v in counts.items()})
    return {"counts": counts, "quotas": quotas}


async def handle_make_folds(args: dict) -> dict:
    """Handle make_folds tool."""
    sessions = args.get("sessions")
    if not sessions:
        return {"error": "sessions is required"}

    folds = make_folds([int(s) for s in sessions])
    return {
        "count": len(folds),
        "folds": [{"test": f.test, "val": f.val, "train": list(f.train)} for f in folds]
    }


async def handle_summarize_manifest(args: dict) -> dict:
    """Handle summarize_manifest tool."""
    manifest = args.get("manifest")
    if not manifest:
        return {"error": "manifest is required"}

    rows, header = read_rows(manifest)
    labelled = [r for r in rows if "emotion" in r]
    counts = {e: 0 for e in EMOTIONS}
    for r in labelled:
        if r["emotion"] in counts:
            counts[r["emotion"]] += 1

    summary = {
        "manifest": manifest,
        HEADER_KEY: header,
        "count": len(rows),
        "emotions": counts,
        "sessions": sorted({r["session"] for r in labelled if "session" in r}),
        "speakers": sorted({r["speaker"] for r in labelled if "speaker" in r}),
    }
    methods = sorted({r["method"] for r in rows if "method" in r})
    if methods:
        summary["methods"] = methods
        summary["truncated"] = sum(1 for r in rows if r.get("truncated"))
    return summary


async def handle_compute_metrics(args: dict) -> dict:
    """Handle compute_metrics tool."""
    y_true = args.get("y_true")
    y_pred = args.get("y_pred")
    if not y_true or not y_pred:
        return {"error": "y_true and y_pred are required"}

    if len(y_true) != len(y_pred):
        return {"error": "y_true and y_pred must have the same length"}

    metrics = compute_metrics(y_true, y_pred)
    cm = metrics["confusion"]
    return {
        "count": len(y_true),
        "wa": metrics["wa"],
        "ua": metrics["ua"],
        "ua_partial": metrics["ua_partial"],
        "classes": list(cm.classes),
        "confusion": cm.counts.tolist(),
        "recalls": {c: (None if r != r else float(r)) for c, r in zip(cm.classes, cm.recalls)},
    }


# =============================================================================
# MAIN
# =============================================================================

async def main():
    """Start the MCP server."""
    logger.info("Starting EmoAug MCP Server...")

    async with mcp.server.stdio.stdio_server() as (read_stream, write_stream):
        await server.run(
            read_stream,
            write_stream,
            server.create_initialization_options()
        )


if __name__ == "__main__":
    asyncio.run(main())
