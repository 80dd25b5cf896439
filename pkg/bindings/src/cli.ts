/**
 * Subprocess bridge to the emshape CLI.
 *
 * The bindings consume the toolkit only through its published surfaces:
 * the volume file format and the command-line interface. CLI exit codes
 * map onto typed errors (2 usage, 3 data, 4 check failure).
 */

import { spawnSync } from "node:child_process";

export class EmshapeUsageError extends Error {}
export class EmshapeDataError extends Error {}
export class EmshapeCheckError extends Error {}

export interface CliResult {
  stdout: string;
  stderr: string;
}

function interpreter(): string {
  return process.env.EMSHAPE_PYTHON ?? "python3";
}

export function runCli(args: string[]): CliResult {
  const proc = spawnSync(interpreter(), ["-m", "emshape.cli", ...args], {
    encoding: "utf8",
    maxBuffer: 1 << 26,
  });
  if (proc.error) {
    throw new EmshapeDataError(`failed to launch emshape CLI: ${proc.error.message}`);
  }
  if (proc.status !== 0) {
    const detail = (proc.stderr || proc.stdout || "").trim();
    const message = `emshape ${args[0]} exited with ${proc.status}: ${detail}`;
    if (proc.status === 2) throw new EmshapeUsageError(message);
    if (proc.status === 4) throw new EmshapeCheckError(message);
    throw new EmshapeDataError(message);
  }
  return { stdout: proc.stdout, stderr: proc.stderr };
}
