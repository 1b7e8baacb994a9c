#pragma once

#include "segkit/data.hpp"
#include "segkit/losses.hpp"
#include "segkit/models.hpp"
#include "segkit/registry.hpp"

namespace segkit {

namespace detail {

inline config::Value ints(std::initializer_list<int> v) {
  config::Value::Sequence s;
  for (int x : v) s.emplace_back(x);
  return s;
}

inline config::Value reals(std::initializer_list<double> v) {
  config::Value::Sequence s;
  for (double x : v) s.emplace_back(x);
  return s;
}

inline config::Value map(std::initializer_list<std::pair<const char*, config::Value>> entries) {
  config::Value m = config::Value::mapping();
  for (const auto& [k, v] : entries) m.set(k, v);
  return m;
}

template <typename T>
std::shared_ptr<Backbone<T>> build_backbone(ParamReader& r, BuildContext<T>& ctx) {
  return ctx.registry.template create_as<Backbone<T>>(ComponentKind::backbone, r.value("backbone"), ctx.rng, r.field("backbone"),
                                                      ctx.base_dir);
}

inline HeadOptions head_options(ParamReader& r) {
  HeadOptions o;
  o.align_corners = r.boolean("align_corners");
  o.aux = r.boolean("aux");
  o.aux_channels = r.size("aux_channels", 1);
  return o;
}

inline config::Value model_defaults(config::Value backbone, std::initializer_list<std::pair<const char*, config::Value>> extra) {
  config::Value m = map({{"num_classes", 3}, {"backbone", std::move(backbone)}, {"align_corners", false}, {"aux", false}, {"aux_channels", 16}});
  for (const auto& [k, v] : extra) m.set(k, v);
  return m;
}

inline config::Value resnet_spec() { return map({{"type", "tiny_resnet"}}); }

}  // namespace detail

/// Registers the shipped catalogue under registrant "segkit".
template <typename T>
void register_builtins(ComponentRegistry<T>& reg) {
  using detail::ints;
  using detail::map;
  using detail::model_defaults;
  using detail::reals;
  using K = ComponentKind;
  const std::string who = "segkit";

  // backbones
  reg.register_builder(
      K::backbone, "tiny_resnet",
      [](ParamReader& r, BuildContext<T>& ctx) -> std::shared_ptr<Component> {
        return std::make_shared<TinyResNet<T>>(r.size_list("widths", 1), r.size("output_stride"), ctx.rng, r.size("in_channels", 1));
      },
      map({{"widths", ints({16, 32, 64, 128})}, {"output_stride", 8}, {"in_channels", 3}}), who);
  reg.register_builder(
      K::backbone, "tiny_vgg",
      [](ParamReader& r, BuildContext<T>& ctx) -> std::shared_ptr<Component> {
        const PoolMode pool = r.choice("pool", {"max", "avg"}) == "max" ? PoolMode::max : PoolMode::avg;
        return std::make_shared<TinyVgg<T>>(r.size_list("widths", 1), pool, ctx.rng, r.size("in_channels", 1));
      },
      map({{"widths", ints({16, 32, 64})}, {"pool", "max"}, {"in_channels", 3}}), who);

  // models
  reg.register_builder(
      K::model, "fcn",
      [](ParamReader& r, BuildContext<T>& ctx) -> std::shared_ptr<Component> {
        const std::size_t k = r.size("num_classes", 1);
        auto bb = detail::build_backbone(r, ctx);
        return std::make_shared<FcnModel<T>>(k, bb, r.size("channels", 1), detail::head_options(r), ctx.rng);
      },
      model_defaults(detail::resnet_spec(), {{"channels", 16}}), who);
  reg.register_builder(
      K::model, "unet",
      [](ParamReader& r, BuildContext<T>& ctx) -> std::shared_ptr<Component> {
        const std::size_t k = r.size("num_classes", 1);
        auto bb = detail::build_backbone(r, ctx);
        return std::make_shared<UNetModel<T>>(k, bb, detail::head_options(r), ctx.rng);
      },
      model_defaults(map({{"type", "tiny_vgg"}}), {}), who);
  reg.register_builder(
      K::model, "pspnet",
      [](ParamReader& r, BuildContext<T>& ctx) -> std::shared_ptr<Component> {
        const std::size_t k = r.size("num_classes", 1);
        auto bb = detail::build_backbone(r, ctx);
        return std::make_shared<PspNetModel<T>>(k, bb, r.size_list("bins", 1), r.size("proj_channels", 1), r.size("channels", 1),
                                                detail::head_options(r), ctx.rng);
      },
      model_defaults(detail::resnet_spec(), {{"bins", ints({1, 2, 3, 6})}, {"proj_channels", 8}, {"channels", 16}}), who);
  reg.register_builder(
      K::model, "deeplabv3",
      [](ParamReader& r, BuildContext<T>& ctx) -> std::shared_ptr<Component> {
        const std::size_t k = r.size("num_classes", 1);
        auto bb = detail::build_backbone(r, ctx);
        return std::make_shared<DeepLabV3Model<T>>(k, bb, r.size_list("rates", 1), r.size("aspp_channels", 1), detail::head_options(r),
                                                   ctx.rng);
      },
      model_defaults(detail::resnet_spec(), {{"rates", ints({1, 2, 3})}, {"aspp_channels", 16}}), who);
  reg.register_builder(
      K::model, "deeplabv3p",
      [](ParamReader& r, BuildContext<T>& ctx) -> std::shared_ptr<Component> {
        const std::size_t k = r.size("num_classes", 1);
        auto bb = detail::build_backbone(r, ctx);
        return std::make_shared<DeepLabV3PlusModel<T>>(k, bb, r.size_list("rates", 1), r.size("aspp_channels", 1),
                                                       r.size("low_level_stride", 1), r.size("reduce_channels", 1),
                                                       r.size("channels", 1), detail::head_options(r), ctx.rng);
      },
      model_defaults(detail::resnet_spec(), {{"rates", ints({1, 2, 3})},
                                             {"aspp_channels", 16},
                                             {"low_level_stride", 4},
                                             {"reduce_channels", 16},
                                             {"channels", 16}}),
      who);
  reg.register_builder(
      K::model, "ocrnet",
      [](ParamReader& r, BuildContext<T>& ctx) -> std::shared_ptr<Component> {
        const std::size_t k = r.size("num_classes", 1);
        auto bb = detail::build_backbone(r, ctx);
        return std::make_shared<OcrNetModel<T>>(k, bb, r.size("channels", 1), r.size("key_channels", 1), detail::head_options(r),
                                                ctx.rng);
      },
      model_defaults(detail::resnet_spec(), {{"channels", 16}, {"key_channels", 8}}), who);

  // losses
  reg.register_builder(
      K::loss, "cross_entropy",
      [](ParamReader& r, BuildContext<T>&) -> std::shared_ptr<Component> {
        return std::make_shared<CrossEntropyLoss>(static_cast<std::int32_t>(r.integer("ignore_index", 0, 255)));
      },
      map({{"ignore_index", kDefaultIgnoreIndex}}), who);

  // transforms
  reg.register_builder(
      K::transform, "random_scale",
      [](ParamReader& r, BuildContext<T>&) -> std::shared_ptr<Component> {
        return std::make_shared<RandomScale>(r.real("lo", 0.0), r.real("hi", 0.0));
      },
      map({{"lo", 0.5}, {"hi", 2.0}}), who);
  reg.register_builder(
      K::transform, "random_hflip",
      [](ParamReader& r, BuildContext<T>&) -> std::shared_ptr<Component> { return std::make_shared<RandomHFlip>(r.real("p", 0.0, 1.0)); },
      map({{"p", 0.5}}), who);
  reg.register_builder(
      K::transform, "random_brightness",
      [](ParamReader& r, BuildContext<T>&) -> std::shared_ptr<Component> {
        return std::make_shared<RandomBrightness>(r.real("delta", 0.0, 0.999999));
      },
      map({{"delta", 0.25}}), who);
  reg.register_builder(
      K::transform, "random_crop_pad",
      [](ParamReader& r, BuildContext<T>&) -> std::shared_ptr<Component> {
        return std::make_shared<RandomCropPad>(r.size("crop_h", 1), r.size("crop_w", 1), r.float_list("pad_value"),
                                               static_cast<std::int32_t>(r.integer("ignore_index", 0, 255)));
      },
      map({{"crop_h", 64}, {"crop_w", 64}, {"pad_value", reals({0.5, 0.5, 0.5})}, {"ignore_index", kDefaultIgnoreIndex}}), who);
  reg.register_builder(
      K::transform, "normalize",
      [](ParamReader& r, BuildContext<T>&) -> std::shared_ptr<Component> {
        return std::make_shared<Normalize>(r.float_list("mean"), r.float_list("std"));
      },
      map({{"mean", reals({0.5, 0.5, 0.5})}, {"std", reals({0.25, 0.25, 0.25})}}), who);

  // datasets
  reg.register_builder(
      K::dataset, "file_list",
      [](ParamReader& r, BuildContext<T>& ctx) -> std::shared_ptr<Component> {
        const std::string list = r.string("list");
        return std::make_shared<FileListDataset>(list.empty() ? list : ctx.resolve_path(list), r.size("num_classes"));
      },
      map({{"list", ""}, {"num_classes", 0}}), who);
}

template <typename T>
ComponentRegistry<T> builtin_registry() {
  ComponentRegistry<T> reg;
  register_builtins(reg);
  return reg;
}

}  // namespace segkit
