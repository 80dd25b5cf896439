/**
 * In-memory bindings over caller-owned contiguous arrays.
 *
 * Label volumes are BigUint64Array in z-major, x-fastest order; results come
 * back as Float32Array (channel-major, 10 planes of D*H*W) or as the parsed
 * evaluation report. Each call round-trips through the toolkit CLI via the
 * documented file format, so outputs are bitwise identical to CLI outputs on
 * the same data. Inputs are never mutated.
 */

import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { runCli } from "./cli.js";
import {
  checkShape,
  readFloat32Payload,
  readSidecar,
  Shape3,
  Spacing3,
  writeLabelVolume,
} from "./volume.js";

export { EmshapeCheckError, EmshapeDataError, EmshapeUsageError } from "./cli.js";
export type { Shape3, Spacing3 };

export type LsdWeighting = "ball" | "gaussian";

export interface LsdOptions {
  sigmaNm: number;
  shape: Shape3;
  spacingNm?: Spacing3;
  mode?: LsdWeighting;
  normalize?: boolean;
  threads?: number;
}

export interface LsdResult {
  /** channel-major float32 planes, channels[c][z][y][x] flattened */
  data: Float32Array;
  channels: number;
  channelNames: string[];
  shape: Shape3;
}

export interface EvalResult {
  instance_dice: number;
  ap: Record<string, number>;
  map: number;
  counts: Record<string, { tp: number; fp: number; fn: number }>;
}

function requireLabels(arr: unknown, what: string): BigUint64Array {
  if (!(arr instanceof BigUint64Array)) {
    throw new TypeError(`${what} must be a BigUint64Array of instance IDs`);
  }
  return arr;
}

function withTempDir<T>(fn: (dir: string) => T): T {
  const dir = mkdtempSync(join(tmpdir(), "emshape-"));
  try {
    return fn(dir);
  } finally {
    rmSync(dir, { recursive: true, force: true });
  }
}

/** Ten-channel shape-descriptor target for a label array. */
export function lsdFromArray(labels: BigUint64Array, options: LsdOptions): LsdResult {
  requireLabels(labels, "labels");
  const { shape, sigmaNm } = options;
  checkShape(shape, labels.length, "labels");
  if (!Number.isFinite(sigmaNm) || sigmaNm <= 0) {
    throw new RangeError(`sigmaNm must be positive and finite, got ${sigmaNm}`);
  }
  const spacing: Spacing3 = options.spacingNm ?? [1, 1, 1];

  return withTempDir((dir) => {
    const labelsPath = join(dir, "labels.raw");
    writeLabelVolume(labelsPath, join(dir, "labels.json"), labels, shape, spacing);
    const outPath = join(dir, "lsd.raw");
    const args = [
      "lsd",
      "--labels", labelsPath,
      "--out", outPath,
      "--sigma", String(sigmaNm),
      "--mode", options.mode ?? "ball",
    ];
    if (options.normalize) args.push("--normalize");
    if (options.threads !== undefined) args.push("--threads", String(options.threads));
    runCli(args);

    const sidecar = readSidecar(join(dir, "lsd.json"));
    const channels = sidecar.channels ?? 1;
    const voxels = shape[0] * shape[1] * shape[2];
    const data = readFloat32Payload(outPath, channels * voxels);
    return {
      data,
      channels,
      channelNames: sidecar.channel_names ?? [],
      shape,
    };
  });
}

/** Instance Dice / 3D mAP report between two label arrays of equal shape. */
export function evalFromArrays(
  pred: BigUint64Array,
  gt: BigUint64Array,
  shape: Shape3,
  spacingNm: Spacing3 = [1, 1, 1]
): EvalResult {
  requireLabels(pred, "pred");
  requireLabels(gt, "gt");
  checkShape(shape, pred.length, "pred");
  checkShape(shape, gt.length, "gt");

  return withTempDir((dir) => {
    const predPath = join(dir, "pred.raw");
    const gtPath = join(dir, "gt.raw");
    writeLabelVolume(predPath, join(dir, "pred.json"), pred, shape, spacingNm);
    writeLabelVolume(gtPath, join(dir, "gt.json"), gt, shape, spacingNm);
    const reportPath = join(dir, "report.json");
    runCli(["eval", "--pred", predPath, "--gt", gtPath, "--report", reportPath]);
    return JSON.parse(readFileSync(reportPath, "utf8")) as EvalResult;
  });
}

/** Toolkit version string, e.g. "emshape 0.1.0". */
export function version(): string {
  return runCli(["version"]).stdout.trim();
}
