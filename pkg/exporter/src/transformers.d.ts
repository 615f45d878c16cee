// Optional dependency: typed as any so the exporter builds without it.
declare module "@xenova/transformers";
