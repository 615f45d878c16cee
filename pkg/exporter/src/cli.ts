#!/usr/bin/env node
/**
 * export-text: class names -> guidance container (frozen text encoder)
 * export-images: dataset tree -> embedding container (frozen image encoder)
 */
import { promises as fs } from "node:fs";
import { parseArgs } from "node:util";

import { ContainerError } from "./container.js";
import {
  DEFAULT_CLIP_MODEL,
  DEFAULT_VIT_MODEL,
  EncoderError,
  clipImageEncoder,
  clipTextEncoder,
  vitImageEncoder,
} from "./encoder.js";
import { exportImageFeatures } from "./export_images.js";
import { exportTextGuidance } from "./export_text.js";

const USAGE = `usage:
  export-text   --classes <file|a,b,c> --out <path> [--model id] [--template "a photo of a {}"]
  export-images --root <dir> --out <path> [--encoder clip|vit] [--model id]
                [--normalize] [--domain-order a,b,c] [--class-order a,b,c]`;

async function readClassList(spec: string): Promise<string[]> {
  try {
    const stat = await fs.stat(spec);
    if (stat.isFile()) {
      const text = await fs.readFile(spec, "utf-8");
      return text.split("\n").map((s) => s.trim()).filter(Boolean);
    }
  } catch {
    // not a file: fall through to the comma-list form
  }
  return spec.split(",").map((s) => s.trim()).filter(Boolean);
}

async function runExportText(argv: string[]): Promise<number> {
  const { values } = parseArgs({
    args: argv,
    options: {
      classes: { type: "string" },
      out: { type: "string" },
      model: { type: "string", default: DEFAULT_CLIP_MODEL },
      template: { type: "string" },
    },
  });
  if (!values.classes || !values.out) {
    console.error(USAGE);
    return 2;
  }
  const names = await readClassList(values.classes);
  const encoder = await clipTextEncoder(values.model);
  const container = await exportTextGuidance(names, encoder, values.out, {
    template: values.template,
  });
  console.log(`wrote ${values.out}: ${container.classNames.length} guidance rows, dim ${container.features[0].length}`);
  return 0;
}

async function runExportImages(argv: string[]): Promise<number> {
  const { values } = parseArgs({
    args: argv,
    options: {
      root: { type: "string" },
      out: { type: "string" },
      encoder: { type: "string", default: "clip" },
      model: { type: "string" },
      normalize: { type: "boolean", default: false },
      "domain-order": { type: "string" },
      "class-order": { type: "string" },
    },
  });
  if (!values.root || !values.out) {
    console.error(USAGE);
    return 2;
  }
  let encoder;
  if (values.encoder === "clip") {
    encoder = await clipImageEncoder(values.model ?? DEFAULT_CLIP_MODEL);
  } else if (values.encoder === "vit") {
    encoder = await vitImageEncoder(values.model ?? DEFAULT_VIT_MODEL);
  } else {
    console.error(`unknown encoder ${values.encoder}; expected clip or vit`);
    return 2;
  }
  const container = await exportImageFeatures(values.root, encoder, values.out, {
    normalize: values.normalize,
    domainOrder: values["domain-order"]?.split(","),
    classOrder: values["class-order"]?.split(","),
    onError: (file, error) => console.error(`failed: ${file}: ${error}`),
  });
  console.log(
    `wrote ${values.out}: ${container.features.length} rows, ` +
      `${container.classNames.length} classes, ${container.domainNames.length} domains`,
  );
  return 0;
}

export async function main(argv: string[]): Promise<number> {
  const [command, ...rest] = argv;
  try {
    if (command === "export-text") return await runExportText(rest);
    if (command === "export-images") return await runExportImages(rest);
    console.error(USAGE);
    return 2;
  } catch (exc) {
    if (exc instanceof ContainerError || exc instanceof EncoderError) {
      console.error(String(exc.message));
      return 1;
    }
    throw exc;
  }
}

const isMain = process.argv[1] && import.meta.url.endsWith(process.argv[1].split("/").pop()!);
if (isMain) {
  main(process.argv.slice(2)).then((code) => process.exit(code));
}
