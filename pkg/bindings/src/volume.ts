/**
 * Raw little-endian payload + JSON sidecar volume format.
 *
 * Mirrors the toolkit's on-disk schema: the sidecar carries
 * {shape: [D, H, W], dtype, spacing_nm, order: "zyx", endianness: "little",
 * channels?} and the payload is the bare array, x fastest, channel-major
 * when multi-channel.
 */

import { endianness } from "node:os";
import { readFileSync, writeFileSync } from "node:fs";

export type Shape3 = readonly [number, number, number];
export type Spacing3 = readonly [number, number, number];

export interface Sidecar {
  shape: number[];
  dtype: "u8" | "u64" | "f32";
  spacing_nm: number[];
  order: "zyx";
  endianness: "little";
  channels?: number;
  channel_names?: string[];
}

/** The payload format is little-endian; typed arrays follow the host CPU. */
export function assertLittleEndianHost(): void {
  if (endianness() !== "LE") {
    throw new Error("emshape bindings require a little-endian host");
  }
}

export function checkShape(shape: Shape3, length: number, what: string): void {
  if (
    shape.length !== 3 ||
    shape.some((s) => !Number.isInteger(s) || s < 1)
  ) {
    throw new RangeError(`${what}: shape must be three positive integers, got [${shape}]`);
  }
  const expected = shape[0] * shape[1] * shape[2];
  if (length !== expected) {
    throw new RangeError(
      `${what}: array has ${length} elements but shape [${shape}] implies ${expected}`
    );
  }
}

export function writeLabelVolume(
  payloadPath: string,
  sidecarPath: string,
  labels: BigUint64Array,
  shape: Shape3,
  spacingNm: Spacing3
): void {
  assertLittleEndianHost();
  // zero-copy view over the caller's buffer; the caller keeps it alive
  const view = Buffer.from(labels.buffer, labels.byteOffset, labels.byteLength);
  writeFileSync(payloadPath, view);
  const sidecar: Sidecar = {
    shape: [...shape],
    dtype: "u64",
    spacing_nm: [...spacingNm],
    order: "zyx",
    endianness: "little",
  };
  writeFileSync(sidecarPath, JSON.stringify(sidecar) + "\n");
}

export function readSidecar(sidecarPath: string): Sidecar {
  return JSON.parse(readFileSync(sidecarPath, "utf8")) as Sidecar;
}

export function readFloat32Payload(payloadPath: string, expectedLength: number): Float32Array {
  assertLittleEndianHost();
  const raw = readFileSync(payloadPath);
  if (raw.byteLength !== expectedLength * 4) {
    throw new RangeError(
      `payload ${payloadPath} has ${raw.byteLength} bytes, expected ${expectedLength * 4}`
    );
  }
  // copy out of the file buffer so the result owns its memory
  const out = new Float32Array(expectedLength);
  out.set(new Float32Array(raw.buffer, raw.byteOffset, expectedLength));
  return out;
}

export function readBigUint64Payload(payloadPath: string, expectedLength: number): BigUint64Array {
  assertLittleEndianHost();
  const raw = readFileSync(payloadPath);
  if (raw.byteLength !== expectedLength * 8) {
    throw new RangeError(
      `payload ${payloadPath} has ${raw.byteLength} bytes, expected ${expectedLength * 8}`
    );
  }
  const out = new BigUint64Array(expectedLength);
  out.set(new BigUint64Array(raw.buffer, raw.byteOffset, expectedLength));
  return out;
}
