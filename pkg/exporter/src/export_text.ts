/**
 * Class-name guidance export: encode each class name with a frozen text
 * encoder and emit a container with one unit row per class.
 */
import { ContainerError, EmbeddingContainer, normalizeRow, writeContainer } from "./container.js";
import { TextEncoder } from "./encoder.js";

export interface TextExportOptions {
  /** applied to each class name; "{}" is replaced by the name */
  template?: string;
}

export function applyTemplate(name: string, template?: string): string {
  if (!template) return name;
  if (!template.includes("{}")) {
    throw new ContainerError("BadManifest", `template ${JSON.stringify(template)} has no {} slot`);
  }
  return template.replaceAll("{}", name);
}

export async function buildTextGuidance(
  classNames: string[],
  encoder: TextEncoder,
  options: TextExportOptions = {},
): Promise<EmbeddingContainer> {
  if (classNames.length < 1) {
    throw new ContainerError("Empty", "no class names given");
  }
  if (new Set(classNames).size !== classNames.length) {
    throw new ContainerError("BadManifest", "duplicate class names");
  }
  const prompts = classNames.map((name) => applyTemplate(name, options.template));
  const rows = await encoder.encodeText(prompts);
  if (rows.length !== classNames.length) {
    throw new ContainerError("BadManifest", "encoder returned a wrong row count");
  }
  return {
    features: rows.map(normalizeRow),
    labels: classNames.map((_, i) => i),
    domainIds: classNames.map(() => 0),
    classNames: [...classNames],
    domainNames: ["guidance"],
    normalized: true,
  };
}

export async function exportTextGuidance(
  classNames: string[],
  encoder: TextEncoder,
  outPath: string,
  options: TextExportOptions = {},
): Promise<EmbeddingContainer> {
  const container = await buildTextGuidance(classNames, encoder, options);
  await writeContainer(container, outPath);
  return container;
}
