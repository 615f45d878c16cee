/**
 * Binary embedding container, byte-compatible with the engine's loader.
 *
 * Layout (little-endian):
 *   magic "DCP1" | u32 version=1 | u32 N | u32 d | u32 K | u32 T |
 *   u8 normalized | N*d f32 features (row-major) | N u32 labels |
 *   N u32 domain ids | u64 manifest length | UTF-8 JSON manifest
 */
import { promises as fs } from "node:fs";

export const MAGIC = "DCP1";
export const VERSION = 1;
const HEADER_SIZE = 4 + 4 * 5 + 1;

export class ContainerError extends Error {
  constructor(public readonly code: string, message: string) {
    super(`${code}: ${message}`);
    this.name = "ContainerError";
  }
}

export interface EmbeddingContainer {
  /** one Float64Array per row; rows are stored as f32 */
  features: Float64Array[];
  labels: number[];
  domainIds: number[];
  classNames: string[];
  domainNames: string[];
  normalized: boolean;
}

function validate(c: EmbeddingContainer): { n: number; d: number } {
  const n = c.features.length;
  if (n < 1) throw new ContainerError("Empty", "container needs at least one row");
  const d = c.features[0].length;
  if (d < 2) throw new ContainerError("BadManifest", `feature dim ${d} < 2`);
  if (c.labels.length !== n || c.domainIds.length !== n) {
    throw new ContainerError("BadManifest", "labels/domainIds length mismatch");
  }
  const k = c.classNames.length;
  const t = c.domainNames.length;
  if (k < 1 || t < 1) {
    throw new ContainerError("BadManifest", "need at least one class and domain");
  }
  if (new Set(c.classNames).size !== k || c.classNames.some((s) => !s)) {
    throw new ContainerError("BadManifest", "class names must be unique and non-empty");
  }
  if (new Set(c.domainNames).size !== t || c.domainNames.some((s) => !s)) {
    throw new ContainerError("BadManifest", "domain names must be unique and non-empty");
  }
  for (let i = 0; i < n; i++) {
    if (c.features[i].length !== d) {
      throw new ContainerError("BadManifest", `row ${i} has dim ${c.features[i].length} != ${d}`);
    }
    for (const v of c.features[i]) {
      if (!Number.isFinite(v)) throw new ContainerError("NonFinite", `row ${i} has a non-finite value`);
    }
    if (!Number.isInteger(c.labels[i]) || c.labels[i] < 0 || c.labels[i] >= k) {
      throw new ContainerError("LabelOutOfRange", `label ${c.labels[i]} outside [0, ${k})`);
    }
    if (!Number.isInteger(c.domainIds[i]) || c.domainIds[i] < 0 || c.domainIds[i] >= t) {
      throw new ContainerError("LabelOutOfRange", `domain id ${c.domainIds[i]} outside [0, ${t})`);
    }
    if (c.normalized) {
      let sq = 0;
      for (const v of c.features[i]) sq += v * v;
      if (Math.abs(Math.sqrt(sq) - 1.0) > 1e-5) {
        throw new ContainerError("BadManifest", `normalized flag set but row ${i} is not unit`);
      }
    }
  }
  return { n, d };
}

export function encodeContainer(c: EmbeddingContainer): Buffer {
  const { n, d } = validate(c);
  const manifest = Buffer.from(
    JSON.stringify({ class_names: c.classNames, domain_names: c.domainNames }),
    "utf-8",
  );
  const total = HEADER_SIZE + n * d * 4 + n * 4 * 2 + 8 + manifest.length;
  const buf = Buffer.alloc(total);
  let off = 0;
  buf.write(MAGIC, off, "ascii");
  off += 4;
  off = buf.writeUInt32LE(VERSION, off);
  off = buf.writeUInt32LE(n, off);
  off = buf.writeUInt32LE(d, off);
  off = buf.writeUInt32LE(c.classNames.length, off);
  off = buf.writeUInt32LE(c.domainNames.length, off);
  off = buf.writeUInt8(c.normalized ? 1 : 0, off);
  for (const row of c.features) {
    for (const v of row) off = buf.writeFloatLE(Math.fround(v), off);
  }
  for (const label of c.labels) off = buf.writeUInt32LE(label, off);
  for (const dom of c.domainIds) off = buf.writeUInt32LE(dom, off);
  off = Number(buf.writeBigUInt64LE(BigInt(manifest.length), off));
  manifest.copy(buf, off);
  return buf;
}

export async function writeContainer(c: EmbeddingContainer, path: string): Promise<void> {
  await fs.writeFile(path, encodeContainer(c));
}

export function decodeContainer(buf: Buffer): EmbeddingContainer {
  if (buf.length < HEADER_SIZE) throw new ContainerError("CorruptHeader", "file shorter than header");
  if (buf.toString("ascii", 0, 4) !== MAGIC) {
    throw new ContainerError("CorruptHeader", "bad magic");
  }
  let off = 4;
  const version = buf.readUInt32LE(off);
  off += 4;
  if (version !== VERSION) throw new ContainerError("CorruptHeader", `unsupported version ${version}`);
  const n = buf.readUInt32LE(off);
  off += 4;
  const d = buf.readUInt32LE(off);
  off += 4;
  const k = buf.readUInt32LE(off);
  off += 4;
  const t = buf.readUInt32LE(off);
  off += 4;
  const normalized = buf.readUInt8(off) === 1;
  off += 1;
  if (n < 1) throw new ContainerError("Empty", "container declares zero rows");

  const need = (bytes: number, what: string) => {
    if (buf.length < off + bytes) throw new ContainerError("Truncated", `${what} truncated`);
  };
  need(n * d * 4, "features");
  const features: Float64Array[] = [];
  for (let i = 0; i < n; i++) {
    const row = new Float64Array(d);
    for (let j = 0; j < d; j++) {
      row[j] = buf.readFloatLE(off);
      off += 4;
    }
    features.push(row);
  }
  need(n * 4, "labels");
  const labels: number[] = [];
  for (let i = 0; i < n; i++) {
    labels.push(buf.readUInt32LE(off));
    off += 4;
  }
  need(n * 4, "domain ids");
  const domainIds: number[] = [];
  for (let i = 0; i < n; i++) {
    domainIds.push(buf.readUInt32LE(off));
    off += 4;
  }
  need(8, "manifest length");
  const manifestLen = Number(buf.readBigUInt64LE(off));
  off += 8;
  need(manifestLen, "manifest");
  let meta: { class_names?: unknown; domain_names?: unknown };
  try {
    meta = JSON.parse(buf.toString("utf-8", off, off + manifestLen));
  } catch (exc) {
    throw new ContainerError("BadManifest", `manifest JSON invalid: ${exc}`);
  }
  const classNames = meta.class_names;
  const domainNames = meta.domain_names;
  if (!Array.isArray(classNames) || !Array.isArray(domainNames)) {
    throw new ContainerError("BadManifest", "manifest missing name lists");
  }
  if (classNames.length !== k || domainNames.length !== t) {
    throw new ContainerError("BadManifest", "manifest names disagree with header");
  }
  const container: EmbeddingContainer = {
    features,
    labels,
    domainIds,
    classNames: classNames.map(String),
    domainNames: domainNames.map(String),
    normalized,
  };
  validate(container);
  return container;
}

export async function readContainer(path: string): Promise<EmbeddingContainer> {
  return decodeContainer(await fs.readFile(path));
}

export function normalizeRow(row: Float64Array): Float64Array {
  let sq = 0;
  for (const v of row) sq += v * v;
  const norm = Math.sqrt(sq);
  if (norm < 1e-12) throw new ContainerError("ZeroVector", "cannot normalize a zero row");
  const out = new Float64Array(row.length);
  for (let j = 0; j < row.length; j++) out[j] = row[j] / norm;
  return out;
}
