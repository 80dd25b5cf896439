/**
 * Cross-language equivalence: binding outputs must be bitwise equal to
 * CLI outputs on shared fixtures, and error mapping must hold.
 */

import { mkdirSync, mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, describe, expect, it } from "vitest";

import {
  EmshapeDataError,
  evalFromArrays,
  lsdFromArray,
  version,
} from "../src/index.js";
import { runCli } from "../src/cli.js";
import {
  readBigUint64Payload,
  readSidecar,
  writeLabelVolume,
} from "../src/volume.js";

const scratch = mkdtempSync(join(tmpdir(), "emshape-fixtures-"));
afterAll(() => rmSync(scratch, { recursive: true, force: true }));

type Shape = [number, number, number];

interface Fixture {
  labels: BigUint64Array;
  shape: Shape;
  labelsPath: string;
  dir: string;
}

function synthFixture(seed: number, shape: Shape, count: number): Fixture {
  const dir = join(scratch, `fix${seed}`);
  mkdirSync(dir, { recursive: true });
  const labelsPath = join(dir, "labels.raw");
  runCli([
    "synth", "--out", labelsPath, "--shape", ...shape.map(String),
    "--count", String(count), "--size-min", "2", "--size-max", "3",
    "--seed", String(seed),
  ]);
  const sidecar = readSidecar(join(dir, "labels.json"));
  const voxels = sidecar.shape[0] * sidecar.shape[1] * sidecar.shape[2];
  return { labels: readBigUint64Payload(labelsPath, voxels), shape, labelsPath, dir };
}

describe("cross-language equivalence", () => {
  it("lsd outputs are bitwise equal to CLI outputs on 20 fixtures", () => {
    for (let k = 0; k < 20; k++) {
      const shape: Shape = [14 + (k % 4) * 2, 16, 15];
      const fix = synthFixture(k, shape, 1 + (k % 3));
      const sigma = 1.5 + 0.2 * k;
      const mode = k % 2 === 0 ? "ball" : "gaussian";
      const normalize = k % 5 === 0;

      const outPath = join(fix.dir, "cli_lsd.raw");
      const args = [
        "lsd", "--labels", fix.labelsPath, "--out", outPath,
        "--sigma", String(sigma), "--mode", mode, "--threads", "1",
      ];
      if (normalize) args.push("--normalize");
      runCli(args);
      const cliBytes = readFileSync(outPath);

      const bound = lsdFromArray(fix.labels, {
        shape: fix.shape,
        sigmaNm: sigma,
        mode,
        normalize,
        threads: 1,
      });
      expect(bound.channels).toBe(10);
      expect(bound.channelNames.length).toBe(10);
      const boundBytes = Buffer.from(bound.data.buffer, 0, bound.data.byteLength);
      expect(boundBytes.equals(cliBytes)).toBe(true);
    }
  }, 300_000);

  it("eval reports match CLI JSON on shifted predictions", () => {
    for (let k = 0; k < 5; k++) {
      const shape: Shape = [12, 12, 12];
      const fix = synthFixture(100 + k, shape, 2);

      // prediction = ground truth shifted one voxel along x (clipped)
      const [d, h, w] = shape;
      const pred = new BigUint64Array(fix.labels.length);
      for (let z = 0; z < d; z++) {
        for (let y = 0; y < h; y++) {
          for (let x = 1; x < w; x++) {
            pred[(z * h + y) * w + x] = fix.labels[(z * h + y) * w + x - 1];
          }
        }
      }

      const predPath = join(fix.dir, "pred.raw");
      writeLabelVolume(predPath, join(fix.dir, "pred.json"), pred, shape, [1, 1, 1]);
      const reportPath = join(fix.dir, "cli_report.json");
      runCli(["eval", "--pred", predPath, "--gt", fix.labelsPath, "--report", reportPath]);
      const cliReport = JSON.parse(readFileSync(reportPath, "utf8"));

      const boundReport = evalFromArrays(pred, fix.labels, shape);
      expect(boundReport).toStrictEqual(cliReport);
    }
  }, 120_000);

  it("single-voxel label array matches the CLI bitwise", () => {
    const shape: Shape = [5, 5, 5];
    const labels = new BigUint64Array(125);
    labels[62] = 9n; // center voxel
    const dir = join(scratch, "single");
    mkdirSync(dir, { recursive: true });
    const labelsPath = join(dir, "labels.raw");
    writeLabelVolume(labelsPath, join(dir, "labels.json"), labels, shape, [1, 1, 1]);
    const outPath = join(dir, "cli_lsd.raw");
    runCli(["lsd", "--labels", labelsPath, "--out", outPath, "--sigma", "2", "--threads", "1"]);
    const bound = lsdFromArray(labels, { shape, sigmaNm: 2, threads: 1 });
    const boundBytes = Buffer.from(bound.data.buffer, 0, bound.data.byteLength);
    expect(boundBytes.equals(readFileSync(outPath))).toBe(true);
  });

  it("version matches the CLI", () => {
    expect(version()).toBe(runCli(["version"]).stdout.trim());
    expect(version()).toMatch(/^emshape \d+\.\d+\.\d+$/);
  });
});

describe("error mapping and input contracts", () => {
  const shape: Shape = [2, 2, 2];

  it("wrong dtype raises TypeError", () => {
    const wrong = new Float64Array(8) as unknown as BigUint64Array;
    expect(() => lsdFromArray(wrong, { shape, sigmaNm: 2 })).toThrow(TypeError);
    expect(() => evalFromArrays(wrong, new BigUint64Array(8), shape)).toThrow(TypeError);
  });

  it("shape/length mismatch raises RangeError", () => {
    expect(() => lsdFromArray(new BigUint64Array(7), { shape, sigmaNm: 2 })).toThrow(RangeError);
    expect(() =>
      evalFromArrays(new BigUint64Array(8), new BigUint64Array(7), shape)
    ).toThrow(RangeError);
  });

  it("invalid sigma raises RangeError locally", () => {
    expect(() => lsdFromArray(new BigUint64Array(8), { shape, sigmaNm: 0 })).toThrow(RangeError);
  });

  it("CLI data failures surface as EmshapeDataError", () => {
    expect(() =>
      runCli(["lsd", "--labels", "/nonexistent.raw", "--out", join(scratch, "x.raw"), "--sigma", "2"])
    ).toThrow(EmshapeDataError);
  });

  it("inputs are never mutated", () => {
    const labels = new BigUint64Array(8);
    labels[3] = 7n;
    const before = BigUint64Array.from(labels);
    lsdFromArray(labels, { shape, sigmaNm: 1.5 });
    evalFromArrays(labels, labels, shape);
    expect(labels).toStrictEqual(before);
  });
});
