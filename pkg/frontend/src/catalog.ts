/** Species grid: one card per catalog entry, previews straight from the
 * service's artifact store. */

import type { App } from "./app.js";
import { clear, h } from "./dom.js";

export function renderCatalog(app: App, host: HTMLElement): void {
  if (!host || !app.catalog) return;
  clear(host);
  const grid = h("div", { class: "species-grid", "data-testid": "species-grid" });
  for (const card of app.catalog.species) {
    grid.append(
      h(
        "figure",
        { class: "species-card", "data-testid": `species-card-${card.id}` },
        h("img", {
          src: app.api.base + card.thumbnail_url,
          alt: card.name,
          width: 64,
          height: 64,
        }),
        h("figcaption", {}, `${card.id} ${card.name}`),
        h(
          "button",
          {
            class: "mini",
            title: "set every slot to this species",
            onclick: () => app.useSpeciesEverywhere(card.id),
          },
          "use everywhere",
        ),
      ),
    );
  }
  host.append(h("h2", {}, "catalog"), grid);
}
