/**
 * Frozen pretrained encoders behind a minimal interface.
 *
 * The real implementations load transformers.js lazily, so the exporter
 * stays usable (with injected encoders) when the optional dependency or
 * the model weights are unavailable.
 */

export interface TextEncoder {
  encodeText(texts: string[]): Promise<Float64Array[]>;
}

export interface ImageEncoder {
  encodeImage(path: string): Promise<Float64Array>;
}

export class EncoderError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "EncoderError";
  }
}

async function loadTransformers(): Promise<any> {
  try {
    return await import("@xenova/transformers");
  } catch (exc) {
    throw new EncoderError(
      `transformers.js is not available (install @xenova/transformers): ${exc}`,
    );
  }
}

function toRows(tensor: { dims: number[]; data: Float32Array | number[] }): Float64Array[] {
  const [rows, dim] = tensor.dims.slice(-2);
  const out: Float64Array[] = [];
  for (let i = 0; i < rows; i++) {
    const row = new Float64Array(dim);
    for (let j = 0; j < dim; j++) row[j] = Number(tensor.data[i * dim + j]);
    out.push(row);
  }
  return out;
}

export const DEFAULT_CLIP_MODEL = "Xenova/clip-vit-base-patch16";
export const DEFAULT_VIT_MODEL = "Xenova/vit-base-patch16-224-in21k";

export async function clipTextEncoder(model = DEFAULT_CLIP_MODEL): Promise<TextEncoder> {
  const t = await loadTransformers();
  let tokenizer: any;
  let textModel: any;
  try {
    tokenizer = await t.AutoTokenizer.from_pretrained(model);
    textModel = await t.CLIPTextModelWithProjection.from_pretrained(model);
  } catch (exc) {
    throw new EncoderError(`failed to load text encoder ${model}: ${exc}`);
  }
  return {
    async encodeText(texts: string[]): Promise<Float64Array[]> {
      const inputs = tokenizer(texts, { padding: true, truncation: true });
      const { text_embeds } = await textModel(inputs);
      return toRows(text_embeds);
    },
  };
}

export async function clipImageEncoder(model = DEFAULT_CLIP_MODEL): Promise<ImageEncoder> {
  const t = await loadTransformers();
  let processor: any;
  let visionModel: any;
  try {
    processor = await t.AutoProcessor.from_pretrained(model);
    visionModel = await t.CLIPVisionModelWithProjection.from_pretrained(model);
  } catch (exc) {
    throw new EncoderError(`failed to load image encoder ${model}: ${exc}`);
  }
  return {
    async encodeImage(path: string): Promise<Float64Array> {
      const image = await t.RawImage.read(path);
      const inputs = await processor(image);
      const { image_embeds } = await visionModel(inputs);
      return toRows(image_embeds)[0];
    },
  };
}

export async function vitImageEncoder(model = DEFAULT_VIT_MODEL): Promise<ImageEncoder> {
  const t = await loadTransformers();
  let extractor: any;
  try {
    extractor = await t.pipeline("image-feature-extraction", model);
  } catch (exc) {
    throw new EncoderError(`failed to load image encoder ${model}: ${exc}`);
  }
  return {
    async encodeImage(path: string): Promise<Float64Array> {
      const output = await extractor(path, { pooling: "cls" });
      return toRows(output)[0];
    },
  };
}
