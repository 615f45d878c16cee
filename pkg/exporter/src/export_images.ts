/**
 * Image feature export over a `root/<domain>/<class>/<image>` tree.
 *
 * Domains define the incremental presentation order; classes must be
 * identical across domains and are shared with the guidance file. Decode
 * or encode failures are counted per file and fail the run.
 */
import { promises as fs } from "node:fs";
import * as path from "node:path";

import { ContainerError, EmbeddingContainer, normalizeRow, writeContainer } from "./container.js";
import { ImageEncoder } from "./encoder.js";

const IMAGE_EXTENSIONS = new Set([".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp"]);

export interface ImageExportOptions {
  /** explicit domain presentation order; default: sorted directory names */
  domainOrder?: string[];
  /** explicit class order; default: sorted directory names of the first domain */
  classOrder?: string[];
  normalize?: boolean;
  onError?: (file: string, error: unknown) => void;
}

async function listDirs(root: string): Promise<string[]> {
  const entries = await fs.readdir(root, { withFileTypes: true });
  return entries.filter((e) => e.isDirectory()).map((e) => e.name).sort();
}

async function listImages(dir: string): Promise<string[]> {
  const entries = await fs.readdir(dir, { withFileTypes: true });
  return entries
    .filter((e) => e.isFile() && IMAGE_EXTENSIONS.has(path.extname(e.name).toLowerCase()))
    .map((e) => e.name)
    .sort();
}

export async function buildImageContainer(
  root: string,
  encoder: ImageEncoder,
  options: ImageExportOptions = {},
): Promise<EmbeddingContainer> {
  const domains = options.domainOrder ?? (await listDirs(root));
  if (domains.length < 1) throw new ContainerError("Empty", `no domain directories under ${root}`);
  const classes = options.classOrder ?? (await listDirs(path.join(root, domains[0])));
  if (classes.length < 1) {
    throw new ContainerError("Empty", `no class directories under ${path.join(root, domains[0])}`);
  }

  const features: Float64Array[] = [];
  const labels: number[] = [];
  const domainIds: number[] = [];
  let failures = 0;

  for (let t = 0; t < domains.length; t++) {
    for (let c = 0; c < classes.length; c++) {
      const dir = path.join(root, domains[t], classes[c]);
      let files: string[];
      try {
        files = await listImages(dir);
      } catch {
        throw new ContainerError("MissingClass", `class directory missing: ${dir}`);
      }
      if (files.length === 0) {
        throw new ContainerError("MissingClass", `class directory empty: ${dir}`);
      }
      for (const file of files) {
        const full = path.join(dir, file);
        try {
          const row = await encoder.encodeImage(full);
          features.push(options.normalize ? normalizeRow(row) : row);
          labels.push(c);
          domainIds.push(t);
        } catch (exc) {
          failures += 1;
          options.onError?.(full, exc);
        }
      }
    }
  }
  if (failures > 0) {
    throw new ContainerError("NonFinite", `${failures} image(s) failed to encode`);
  }
  return {
    features,
    labels,
    domainIds,
    classNames: classes,
    domainNames: domains,
    normalized: options.normalize ?? false,
  };
}

export async function exportImageFeatures(
  root: string,
  encoder: ImageEncoder,
  outPath: string,
  options: ImageExportOptions = {},
): Promise<EmbeddingContainer> {
  const container = await buildImageContainer(root, encoder, options);
  await writeContainer(container, outPath);
  return container;
}
